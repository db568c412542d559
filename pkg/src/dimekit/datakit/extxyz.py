"""Extended-XYZ reading and writing.

Grammar (one record per configuration, records concatenated)::

    <atom count>
    energy=<eV> Properties=species:S:1:pos:R:3[:forces:R:3] [other=key ...]
    <symbol> <x> <y> <z> [<fx> <fy> <fz>]

Floats are written with 17 significant digits so that parse/write
round-trips are lossless.
"""

from __future__ import annotations

import io
import os
import shlex
from typing import Iterable, TextIO, Union

import numpy as np

from ..errors import ParseError
from ..geometry import AtomicConfiguration

__all__ = ["SYMBOLS", "symbol_to_z", "parse_extxyz", "write_extxyz", "read_extxyz_file", "write_extxyz_file"]

SYMBOLS = (
    "H He Li Be B C N O F Ne Na Mg Al Si P S Cl Ar K Ca "
    "Sc Ti V Cr Mn Fe Co Ni Cu Zn Ga Ge As Se Br Kr"
).split()
_Z = {s: n + 1 for n, s in enumerate(SYMBOLS)}

_PROPS_POS = "species:S:1:pos:R:3"
_PROPS_FORCES = _PROPS_POS + ":forces:R:3"


def symbol_to_z(symbol: str) -> int:
    try:
        return _Z[symbol]
    except KeyError:
        raise ParseError(f"unknown element symbol {symbol!r}") from None


def _fmt(x: float) -> str:
    return f"{x:.16e}"


def _parse_info(line: str, lineno: int) -> dict:
    try:
        tokens = shlex.split(line)
    except ValueError as exc:
        raise ParseError(f"bad comment line: {exc}", lineno) from None
    info = {}
    for tok in tokens:
        if "=" not in tok:
            raise ParseError(f"expected key=value, got {tok!r}", lineno)
        k, v = tok.split("=", 1)
        info[k] = v
    return info


def parse_extxyz(stream: Union[str, TextIO]) -> list[AtomicConfiguration]:
    """Parse every record in ``stream`` (a text stream or a string)."""
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    lines = stream.read().splitlines()
    out = []
    ln = 0
    while ln < len(lines):
        if not lines[ln].strip():
            ln += 1
            continue
        try:
            n = int(lines[ln].strip())
        except ValueError:
            raise ParseError(f"expected atom count, got {lines[ln]!r}", ln + 1) from None
        if n < 1:
            raise ParseError(f"atom count must be positive, got {n}", ln + 1)
        if ln + 1 >= len(lines):
            raise ParseError("missing comment line", ln + 2)
        info = _parse_info(lines[ln + 1], ln + 2)
        props = info.pop("Properties", _PROPS_POS)
        if props == _PROPS_POS:
            ncol = 4
        elif props == _PROPS_FORCES:
            ncol = 7
        else:
            raise ParseError(f"unsupported Properties={props}", ln + 2)
        energy = None
        if "energy" in info:
            try:
                energy = float(info.pop("energy"))
            except ValueError:
                raise ParseError("energy is not a number", ln + 2) from None
        zs = np.empty(n, dtype=np.int64)
        vals = np.empty((n, ncol - 1))
        for a in range(n):
            row = ln + 2 + a
            if row >= len(lines):
                raise ParseError(f"record ended after {a} of {n} atoms", row + 1)
            fields = lines[row].split()
            if len(fields) != ncol:
                raise ParseError(f"expected {ncol} fields, got {len(fields)}", row + 1)
            try:
                zs[a] = symbol_to_z(fields[0])
            except ParseError as exc:
                raise ParseError(str(exc), row + 1) from None
            try:
                vals[a] = [float(v) for v in fields[1:]]
            except ValueError:
                raise ParseError("non-numeric coordinate", row + 1) from None
        forces = vals[:, 3:6].copy() if ncol == 7 else None
        out.append(
            AtomicConfiguration(zs, vals[:, :3].copy(), energy=energy, forces=forces, info=info)
        )
        ln += 2 + n
    return out


def _record(c: AtomicConfiguration) -> str:
    head = []
    if c.energy is not None:
        head.append(f"energy={_fmt(c.energy)}")
    head.append(f"Properties={_PROPS_FORCES if c.forces is not None else _PROPS_POS}")
    for k, v in c.info.items():
        v = str(v)
        head.append(f"{k}={shlex.quote(v)}" if any(ch.isspace() for ch in v) or not v else f"{k}={v}")
    rows = [str(c.num_atoms), " ".join(head)]
    for a in range(c.num_atoms):
        cols = [SYMBOLS[c.atomic_numbers[a] - 1]] + [_fmt(v) for v in c.positions[a]]
        if c.forces is not None:
            cols += [_fmt(v) for v in c.forces[a]]
        rows.append(" ".join(cols))
    return "\n".join(rows) + "\n"


def write_extxyz(configs: Iterable[AtomicConfiguration], stream: TextIO | None = None) -> str:
    """Serialise ``configs``; returns the text and also writes it to ``stream`` if given."""
    text = "".join(_record(c) for c in configs)
    if stream is not None:
        stream.write(text)
    return text


def read_extxyz_file(path: Union[str, os.PathLike]) -> list[AtomicConfiguration]:
    with open(path, "r", encoding="ascii") as fh:
        return parse_extxyz(fh)


def write_extxyz_file(configs: Iterable[AtomicConfiguration], path: Union[str, os.PathLike]) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        write_extxyz(configs, fh)
