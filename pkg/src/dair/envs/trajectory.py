"""Line-delimited JSON trajectory dumps.

A dump is one header record, one record per environment step, and a closing
``end`` record. Field tables live in ``docs/formats.md``.
"""

from __future__ import annotations

import json

FORMAT = "dair-trajectory"
VERSION = 1


class TrajectoryError(ValueError):
    """A dump is malformed or truncated; ``lineno`` is 1-based."""

    def __init__(self, message, lineno=None):
        super().__init__(message if lineno is None else f"line {lineno}: {message}")
        self.lineno = lineno


def _listify(x):
    if x is None:
        return None
    if hasattr(x, "tolist"):
        return x.tolist()
    return [list(map(float, row)) for row in x]


def write_dump(path, header, steps):
    """Write ``header`` (dict) and an iterable of step dicts to ``path``."""
    with open(path, "w", encoding="utf-8") as fh:
        head = {"kind": "header", "format": FORMAT, "version": VERSION}
        head.update(header)
        fh.write(json.dumps(head) + "\n")
        n = 0
        for rec in steps:
            row = {
                "kind": "step",
                "episode": int(rec.get("episode", 0)),
                "step": int(rec["step"]),
                "agents": _listify(rec["agents"]),
                "objects": _listify(rec["objects"]),
                "alpha": _listify(rec.get("alpha")),
                "reward": float(rec.get("reward", 0.0)),
            }
            fh.write(json.dumps(row) + "\n")
            n += 1
        fh.write(json.dumps({"kind": "end", "steps": n}) + "\n")


def read_dump(path):
    """Parse a dump, returning ``(header, steps)``.

    Raises :class:`TrajectoryError` naming the offending line when a record
    cannot be parsed or the closing record is missing.
    """
    header = None
    steps = []
    ended = False
    lineno = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            if ended:
                raise TrajectoryError("record after end marker", lineno)
            if not line.endswith("\n"):
                raise TrajectoryError("truncated record (no trailing newline)", lineno)
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise TrajectoryError(f"unparseable record: {e.msg}", lineno) from None
            kind = rec.get("kind")
            if header is None:
                if kind != "header" or rec.get("format") != FORMAT:
                    raise TrajectoryError("first record must be a dair-trajectory header", lineno)
                if rec.get("version") != VERSION:
                    raise TrajectoryError(f"unsupported version {rec.get('version')!r}", lineno)
                header = rec
            elif kind == "step":
                for key in ("step", "agents", "objects"):
                    if key not in rec:
                        raise TrajectoryError(f"step record missing {key!r}", lineno)
                steps.append(rec)
            elif kind == "end":
                if rec.get("steps") != len(steps):
                    raise TrajectoryError(f"end marker counts {rec.get('steps')} steps but {len(steps)} were read", lineno)
                ended = True
            else:
                raise TrajectoryError(f"unknown record kind {kind!r}", lineno)
    if header is None:
        raise TrajectoryError("empty dump", max(lineno, 1))
    if not ended:
        raise TrajectoryError("dump is truncated: missing end marker", lineno + 1)
    return header, steps
