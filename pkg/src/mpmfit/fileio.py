"""ASCII PLY particle dumps and TOML scene/experiment configs."""
from __future__ import annotations

import sys
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

PLY_COLUMNS = ("x", "y", "z", "radius", "opacity")


def write_ply(path, positions, radii=None, opacities=None) -> None:
    pos = np.asarray(positions, float).reshape(-1, 3)
    n = len(pos)
    r = np.zeros(n) if radii is None else np.asarray(radii, float)
    o = np.ones(n) if opacities is None else np.asarray(opacities, float)
    head = ["ply", "format ascii 1.0", f"element vertex {n}"]
    head += [f"property double {c}" for c in PLY_COLUMNS]
    head.append("end_header")
    body = [f"{p[0]!r} {p[1]!r} {p[2]!r} {ri!r} {oi!r}" for p, ri, oi in
            zip(pos.tolist(), r.tolist(), o.tolist())]
    Path(path).write_text("\n".join(head + body) + "\n")


def read_ply(path) -> dict:
    """Columns of an ASCII PLY vertex element as arrays keyed by property name."""
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ValueError(f"{path}: not a PLY file")
    n, props, i = 0, [], 1
    while lines[i].strip() != "end_header":
        tok = lines[i].split()
        if tok[0] == "format" and tok[1] != "ascii":
            raise ValueError("only ASCII PLY is supported")
        if tok[:2] == ["element", "vertex"]:
            n = int(tok[2])
        elif tok[0] == "property":
            props.append(tok[-1])
        i += 1
    data = np.array([[float(v) for v in ln.split()] for ln in lines[i + 1:i + 1 + n]]).reshape(n, len(props))
    return {p: data[:, k] for k, p in enumerate(props)}


def read_ply_positions(path) -> np.ndarray:
    cols = read_ply(path)
    return np.stack([cols["x"], cols["y"], cols["z"]], axis=1)


def load_toml(path) -> dict:
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def loads_toml(text: str) -> dict:
    return tomllib.loads(text)
