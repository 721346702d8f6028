"""Slow, obviously-correct matcher used to cross-check the engine.

Machines are kept in a plain list and scanned in (opened_at, creation) order
for every event; progress is a set of filled atom positions.
"""
from cepshed.model import And, Atom, Or, Seq


def _atoms(node, out):
    if isinstance(node, Atom):
        out.append(node.type_id)
        return [len(out) - 1]
    return (node, [_atoms(c, out) for c in node.children])


class NaiveMatcher:
    def __init__(self, ast, window):
        self.types = []
        self.tree = self._build(ast)
        self.window = window
        self.machines = []  # dicts: opened, filled (set), events (list)
        self.matches = []

    def _build(self, node):
        if isinstance(node, Atom):
            self.types.append(node.type_id)
            return ("atom", len(self.types) - 1)
        kind = {Seq: "seq", And: "and", Or: "or"}[type(node)]
        return (kind, [self._build(c) for c in node.children])

    def _done(self, n, filled):
        if n[0] == "atom":
            return n[1] in filled
        res = [self._done(c, filled) for c in n[1]]
        return any(res) if n[0] == "or" else all(res)

    def _wants(self, n, filled):
        """Atom positions that may be filled next, in tree order."""
        if self._done(n, filled):
            return []
        if n[0] == "atom":
            return [n[1]]
        if n[0] == "seq":
            first = next(c for c in n[1] if not self._done(c, filled))
            return self._wants(first, filled)
        return [a for c in n[1] for a in self._wants(c, filled)]

    def _slot(self, filled, t):
        for a in self._wants(self.tree, filled):
            if self.types[a] == t:
                return a
        return None

    def offer(self, ts, t, eid, watermark):
        self.machines = [m for m in self.machines if watermark - m["opened"] <= self.window]
        for m in sorted(self.machines, key=lambda m: (m["opened"], m["n"])):
            a = self._slot(m["filled"], t)
            if a is None:
                continue
            span = [e[0] for e in m["events"]] + [ts]
            if max(span) - min(span) > self.window:
                continue
            m["filled"].add(a)
            m["events"].append((ts, eid))
            if self._done(self.tree, m["filled"]):
                self.machines.remove(m)
                self.matches.append(tuple(e[1] for e in m["events"]))
            return
        a = self._slot(set(), t)
        if a is None:
            return
        m = {"opened": ts, "n": eid, "filled": {a}, "events": [(ts, eid)]}
        if self._done(self.tree, m["filled"]):
            self.matches.append((eid,))
        else:
            self.machines.append(m)

    def run(self, stream):
        wm = float("-inf")
        for ts, t, eid in stream:
            wm = max(wm, ts)
            self.offer(ts, t, eid, wm)
        return self.matches


def sx(text):
    """'seq(0,and(1,2))' -> '(seq 0 (and 1 2))'"""
    import re
    return re.sub(r"([a-z]+)\(", r"(\1 ", text).replace(",", " ")
