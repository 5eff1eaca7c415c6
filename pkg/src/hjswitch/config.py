"""Run configuration: one TOML file describing problem, resolution, sampling.

The initial datum is written in a deliberately tiny expression grammar --
numbers, x (and y in two dimensions), + - *, min, max, abs or |.|, cos, and
parentheses -- evaluated by a purpose-built recursive-descent parser into
picklable expression trees.  No general scripting: runs stay auditable.

Hamiltonian members are declared as ``quadratic_cosine`` blocks (amplitude,
frequency, phase triples) or ``tabulated`` blocks pointing at a CSV grid
file with header ``x,p,value`` and one row per node.
"""

from __future__ import annotations

import hashlib
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import coupling as coupling_mod
from . import models, pde_solver
from .errors import OffDiagonalPositive, ParseError, RowSumNonzero, ValidationError


# ---------------------------------------------------------------------------
# expression grammar

class Expr:
    def __call__(self, points) -> np.ndarray:
        raise NotImplementedError


@dataclass(frozen=True)
class Number(Expr):
    value: float

    def __call__(self, points):
        return np.full(np.asarray(points).shape[0], self.value)


@dataclass(frozen=True)
class Coordinate(Expr):
    axis: int

    def __call__(self, points):
        pts = np.asarray(points, dtype=float)
        if self.axis >= pts.shape[-1]:
            raise ValidationError("expression uses y but the problem is one-dimensional")
        return pts[..., self.axis]


@dataclass(frozen=True)
class Unary(Expr):
    op: str
    arg: Expr

    def __call__(self, points):
        val = self.arg(points)
        if self.op == "neg":
            return -val
        if self.op == "abs":
            return np.abs(val)
        return np.cos(val)


@dataclass(frozen=True)
class Binary(Expr):
    op: str
    left: Expr
    right: Expr

    def __call__(self, points):
        a = self.left(points)
        b = self.right(points)
        if self.op == "+":
            return a + b
        if self.op == "-":
            return a - b
        if self.op == "*":
            return a * b
        if self.op == "min":
            return np.minimum(a, b)
        return np.maximum(a, b)


_FUNCTIONS = {"min", "max", "abs", "cos"}


class _Tokens:
    def __init__(self, text: str):
        self.text = text
        self.pos = 0

    def peek(self) -> str:
        while self.pos < len(self.text) and self.text[self.pos].isspace():
            self.pos += 1
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def take(self) -> str:
        ch = self.peek()
        self.pos += 1
        return ch

    def error(self, message: str) -> ParseError:
        return ParseError(f"{message} at position {self.pos} in {self.text!r}")


def parse_expression(text: str) -> Expr:
    """Parse one datum component; raises ParseError with the offending spot."""
    tokens = _Tokens(text)
    expr = _parse_sum(tokens)
    if tokens.peek():
        raise tokens.error(f"unexpected character {tokens.peek()!r}")
    return expr


def _parse_sum(tokens: _Tokens) -> Expr:
    node = _parse_product(tokens)
    while tokens.peek() in ("+", "-"):
        op = tokens.take()
        node = Binary(op, node, _parse_product(tokens))
    return node


def _parse_product(tokens: _Tokens) -> Expr:
    node = _parse_atom(tokens)
    while True:
        ch = tokens.peek()
        if ch == "*" or ch == "×":
            tokens.take()
            node = Binary("*", node, _parse_atom(tokens))
        else:
            return node


def _parse_atom(tokens: _Tokens) -> Expr:
    ch = tokens.peek()
    if ch == "-":
        tokens.take()
        return Unary("neg", _parse_atom(tokens))
    if ch == "(":
        tokens.take()
        node = _parse_sum(tokens)
        if tokens.peek() != ")":
            raise tokens.error("expected ')'")
        tokens.take()
        return node
    if ch == "|":
        tokens.take()
        node = _parse_sum(tokens)
        if tokens.peek() != "|":
            raise tokens.error("expected closing '|'")
        tokens.take()
        return Unary("abs", node)
    if ch.isdigit() or ch == ".":
        return _parse_number(tokens)
    if ch.isalpha():
        return _parse_name(tokens)
    raise tokens.error(f"unexpected character {ch!r}")


def _parse_number(tokens: _Tokens) -> Expr:
    start = tokens.pos
    text = tokens.text
    while tokens.pos < len(text) and (text[tokens.pos].isdigit() or text[tokens.pos] in ".eE"):
        if text[tokens.pos] in "eE" and tokens.pos + 1 < len(text) and text[tokens.pos + 1] in "+-":
            tokens.pos += 1
        tokens.pos += 1
    try:
        return Number(float(text[start:tokens.pos]))
    except ValueError:
        raise tokens.error(f"bad number {text[start:tokens.pos]!r}") from None


def _parse_name(tokens: _Tokens) -> Expr:
    start = tokens.pos
    text = tokens.text
    while tokens.pos < len(text) and text[tokens.pos].isalpha():
        tokens.pos += 1
    name = text[start:tokens.pos]
    if name == "x":
        return Coordinate(0)
    if name == "y":
        return Coordinate(1)
    if name not in _FUNCTIONS:
        raise tokens.error(f"unknown name {name!r}")
    if tokens.peek() != "(":
        raise tokens.error(f"{name} needs parentheses")
    tokens.take()
    args = [_parse_sum(tokens)]
    while tokens.peek() == ",":
        tokens.take()
        args.append(_parse_sum(tokens))
    if tokens.peek() != ")":
        raise tokens.error("expected ')'")
    tokens.take()
    if name in ("abs", "cos"):
        if len(args) != 1:
            raise tokens.error(f"{name} takes one argument")
        return Unary(name, args[0])
    if len(args) != 2:
        raise tokens.error(f"{name} takes two arguments")
    return Binary(name, args[0], args[1])


# ---------------------------------------------------------------------------
# config loading

@dataclass(frozen=True)
class RunConfig:
    """Validated run description plus the hash of its source bytes."""

    problem: pde_solver.ProblemInstance
    resolution: pde_solver.Resolution
    mc_paths: int
    seed: int
    output_dir: str
    formats: tuple
    config_hash: str
    label: str
    datum_sources: tuple


def load_tabulated_csv(path: Path) -> models.TabulatedHamiltonian:
    try:
        data = np.loadtxt(path, delimiter=",", skiprows=1)
    except OSError as exc:
        raise ValidationError(f"tabulated member file {path} unreadable: {exc}") from exc
    xs = np.unique(data[:, 0])
    ps = np.unique(data[:, 1])
    if data.shape[0] != xs.size * ps.size:
        raise ValidationError(f"{path}: rows do not fill a rectangular (x, p) grid")
    order = np.lexsort((data[:, 1], data[:, 0]))
    values = data[order, 2].reshape(xs.size, ps.size)
    return models.TabulatedHamiltonian(xs, ps, values)


def save_tabulated_csv(member: models.TabulatedHamiltonian, path: str) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write("x,p,value\n")
        for ix, x in enumerate(member.x_grid):
            for ip, p in enumerate(member.p_grid):
                fh.write(f"{float(x)!r},{float(p)!r},{float(member.values[ix, ip])!r}\n")


def _member_from_block(block: dict, base_dir: Path):
    kind = block.get("type")
    if kind == "quadratic_cosine":
        try:
            return models.QuadraticCosine(
                np.asarray(block["amplitudes"], dtype=float),
                np.asarray(block["frequencies"], dtype=float),
                np.asarray(block["phases"], dtype=float),
            )
        except (KeyError, ValueError) as exc:
            raise ValidationError(f"bad quadratic_cosine member: {exc}") from exc
    if kind == "tabulated":
        if "file" not in block:
            raise ValidationError("tabulated member needs a 'file' entry")
        target = base_dir / block["file"]
        if not target.exists():
            raise ValidationError(f"tabulated member file {target} does not exist")
        return load_tabulated_csv(target)
    raise ValidationError(f"unknown member type {kind!r}")


def load_config(path: str) -> RunConfig:
    """Parse and validate a TOML run configuration."""
    source = Path(path)
    try:
        raw_bytes = source.read_bytes()
    except OSError as exc:
        raise ParseError(f"cannot read config {path}: {exc}") from exc
    try:
        raw = tomllib.loads(raw_bytes.decode("utf-8"))
    except (tomllib.TOMLDecodeError, UnicodeDecodeError) as exc:
        raise ParseError(f"{path}: {exc}") from exc

    problem_block = raw.get("problem")
    if not isinstance(problem_block, dict):
        raise ValidationError("config needs a [problem] table")
    for key in ("coupling", "horizon", "half_width", "initial_datum", "hamiltonians"):
        if key not in problem_block:
            raise ValidationError(f"[problem] is missing '{key}'")

    try:
        coupling = coupling_mod.validate(problem_block["coupling"])
    except (RowSumNonzero, OffDiagonalPositive) as exc:
        raise ValidationError(
            f"coupling matrix breaks its nonpositive-off-diagonal / zero-row-sum assumptions: {exc}"
        ) from exc
    members = tuple(
        _member_from_block(block, source.parent) for block in problem_block["hamiltonians"]
    )
    if len(members) != coupling.m:
        raise ValidationError(
            f"{len(members)} Hamiltonian members for a {coupling.m}-state coupling"
        )
    datum_sources = tuple(problem_block["initial_datum"])
    if len(datum_sources) != coupling.m:
        raise ValidationError("one initial-datum expression per component required")
    datum = tuple(parse_expression(text) for text in datum_sources)

    res_block = raw.get("resolution", {})
    if "dx" not in res_block:
        raise ValidationError("[resolution] needs 'dx'")
    resolution = pde_solver.Resolution(
        dx=float(res_block["dx"]),
        dt_fd=_opt_float(res_block, "dt_fd"),
        dt_sl=_opt_float(res_block, "dt_sl"),
        dt_dp=_opt_float(res_block, "dt_dp"),
        q_max=_opt_float(res_block, "q_max"),
    )

    mc_block = raw.get("monte_carlo", {})
    if "seed" not in mc_block:
        raise ValidationError("[monte_carlo] needs an explicit 'seed' (runs must be reproducible)")
    seed = int(mc_block["seed"])
    mc_paths = int(mc_block.get("paths", 1000))

    out_block = raw.get("output", {})
    output_dir = str(out_block.get("directory", "out"))
    formats = tuple(out_block.get("formats", ("csv", "json")))

    family = models.HamiltonianFamily(members)
    try:
        problem = pde_solver.build_problem(
            coupling, family, datum,
            float(problem_block["horizon"]), float(problem_block["half_width"]),
            q_max=resolution.q_max, label=str(problem_block.get("label", source.stem)),
        )
    except ValueError as exc:
        raise ValidationError(str(exc)) from exc
    models.coercivity_report(
        models.HamiltonianFamily(members, q_max=pde_solver.problem_q_max(problem, resolution)),
        x_half_width=problem.half_width,
    )
    bound = pde_solver.cfl_bound(problem, resolution)
    if resolution.dt_fd is not None and resolution.dt_fd > bound * (1.0 + 1e-9):
        raise ValidationError(
            f"dt_fd = {resolution.dt_fd} violates the CFL bound {bound:.4g}"
        )
    return RunConfig(
        problem, resolution, mc_paths, seed, output_dir, formats,
        hashlib.sha256(raw_bytes).hexdigest(), problem.label, datum_sources,
    )


def _opt_float(block: dict, key: str):
    return float(block[key]) if key in block else None
