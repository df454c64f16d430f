"""Run manifests: YAML or JSON text describing a problem, a solver config and command options.

Every error raised while reading a manifest is a :class:`ManifestError` that
carries the 1-based line and column of the offending entry when known.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .expr import ExpressionError, parse_expression
from .grid import Grid
from .nemytskii import Locality, NemytskiiFn
from .noise import MeasureError, MeasureSymmetryError, SpectralMeasure
from .sgcalc import SgSymbol, SobolevKatoIndex
from .solver import CauchyProblemSpec, HypothesisError, SolverConfig

__all__ = ["ManifestError", "RunManifest", "load_manifest", "parse_manifest", "parse_measure"]


class ManifestError(ValueError):
    def __init__(self, message: str, line: int | None = None, column: int | None = None,
                 source: str = "<manifest>"):
        self.line, self.column = line, column
        where = source
        if line is not None:
            where += f":{line}"
            if column is not None:
                where += f":{column}"
        super().__init__(f"{where}: {message}")


@dataclass
class RunManifest:
    spec: CauchyProblemSpec
    config: SolverConfig
    options: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict)
    source: str = "<manifest>"


class _Doc:
    """Parsed data plus a map from key paths to (line, column) marks."""

    def __init__(self, text: str, source: str):
        self.source = source
        self.marks: dict[tuple, tuple[int, int]] = {}
        stripped = text.lstrip()
        if stripped.startswith("{") or stripped.startswith("["):
            try:
                self.data = json.loads(text)
            except json.JSONDecodeError as exc:
                raise ManifestError(exc.msg, exc.lineno, exc.colno, source) from None
            self._json_marks(text)
        else:
            try:
                loader = yaml.SafeLoader(text)
                try:
                    node = loader.get_single_node()
                    self.data = loader.construct_document(node) if node is not None else None
                finally:
                    loader.dispose()
            except yaml.MarkedYAMLError as exc:
                mark = exc.problem_mark or exc.context_mark
                line = mark.line + 1 if mark else None
                col = mark.column + 1 if mark else None
                raise ManifestError(exc.problem or str(exc), line, col, source) from None
            if node is not None:
                self._yaml_marks(node, ())
        if not isinstance(self.data, dict):
            raise ManifestError("top level must be a mapping", 1, 1, source)

    def _yaml_marks(self, node, path):
        self.marks[path] = (node.start_mark.line + 1, node.start_mark.column + 1)
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                self._yaml_marks(v, path + (k.value,))
        elif isinstance(node, yaml.SequenceNode):
            for i, v in enumerate(node.value):
                self._yaml_marks(v, path + (i,))

    def _json_marks(self, text):
        # approximate: locate each key's first occurrence
        lines = text.splitlines()

        def walk(obj, path):
            if isinstance(obj, dict):
                for k, v in obj.items():
                    needle = json.dumps(k)
                    for i, line in enumerate(lines):
                        col = line.find(needle)
                        if col >= 0:
                            self.marks.setdefault(path + (k,), (i + 1, col + 1))
                            break
                    walk(v, path + (k,))

        walk(self.data, ())

    def error(self, path, message, exc=None):
        p = tuple(path)
        while p and p not in self.marks:
            p = p[:-1]
        line, col = self.marks.get(p, (None, None))
        name = ".".join(str(x) for x in path)
        text = f"{name}: {message}" if name else message
        if exc is not None:
            where = self.source + (f":{line}:{col}" if line is not None else "")
            raise exc(f"{where}: {text}")
        raise ManifestError(text, line, col, self.source)

    def get(self, path, default=..., types=None):
        obj: Any = self.data
        for i, key in enumerate(path):
            if not isinstance(obj, dict) or key not in obj:
                if default is ...:
                    self.error(path[:i + 1], "missing required entry")
                return default
            obj = obj[key]
        if types is not None and not isinstance(obj, types):
            self.error(path, f"expected {_type_names(types)}, got {type(obj).__name__}")
        return obj


def _type_names(types):
    types = types if isinstance(types, tuple) else (types,)
    return " or ".join(t.__name__ for t in types)


_NUM = (int, float)


def _pair(doc, path, default=...):
    v = doc.get(path, default)
    if v is None or v is default:
        return v
    if isinstance(v, dict):
        keys = list(v)
        v = [v[k] for k in keys]
    if not (isinstance(v, list) and len(v) == 2 and all(isinstance(x, _NUM) for x in v)):
        doc.error(path, "expected a pair of numbers")
    return float(v[0]), float(v[1])


def parse_measure(doc_or_dict, dim: int, path=("problem", "measure"), source="<manifest>") -> SpectralMeasure:
    """Spectral measure from ``{type, density_expr, atoms}``."""
    doc = doc_or_dict if isinstance(doc_or_dict, _Doc) else _wrap(doc_or_dict, path, source)
    kind = doc.get(path + ("type",), "density", str)
    if kind not in ("density", "atoms", "mixed"):
        doc.error(path + ("type",), f"unknown measure type {kind!r}")
    expr = doc.get(path + ("density_expr",), None, str)
    atoms_raw = doc.get(path + ("atoms",), [], list)
    if kind in ("density", "mixed") and expr is None:
        doc.error(path + ("density_expr",), "a density measure needs density_expr")
    if kind == "atoms" and not atoms_raw:
        doc.error(path + ("atoms",), "an atomic measure needs atoms")
    atoms = []
    for i, a in enumerate(atoms_raw):
        if not (isinstance(a, list) and len(a) == 2):
            doc.error(path + ("atoms", i), "atoms are [location, mass] pairs")
        loc, mass = a
        loc = loc if isinstance(loc, list) else [loc]
        if len(loc) != dim or not all(isinstance(c, _NUM) for c in loc) or not isinstance(mass, _NUM):
            doc.error(path + ("atoms", i), f"atom needs a location of dimension {dim} and a mass")
        atoms.append((tuple(float(c) for c in loc), float(mass)))
    try:
        return SpectralMeasure.from_expr(expr if kind != "atoms" else None, dim, atoms)
    except ExpressionError as exc:
        doc.error(path + ("density_expr",), str(exc))
    except MeasureSymmetryError as exc:
        doc.error(path, str(exc), HypothesisError)
    except MeasureError as exc:
        doc.error(path, str(exc))


def _wrap(data, path, source):
    doc = _Doc.__new__(_Doc)
    doc.source, doc.marks = source, {}
    root: dict = {}
    cur = root
    for key in path[:-1]:
        cur[key] = {}
        cur = cur[key]
    cur[path[-1]] = data
    doc.data = root
    return doc


def _nonlinearity(doc, path, dim, idx, kappa_m) -> NemytskiiFn:
    node = doc.get(path, {"expr": "0"})
    if isinstance(node, (str, int, float)):
        node = {"expr": str(node)}
        expr = node["expr"]
    else:
        expr = str(doc.get(path + ("expr",), None, (str, int, float)))
    lip = doc.get(path + ("lip",), None)
    if lip is None:
        lip = (idx.z - kappa_m, idx.zeta, kappa_m, 0.0)
    elif not (isinstance(lip, list) and len(lip) == 4 and all(isinstance(v, _NUM) for v in lip)):
        doc.error(path + ("lip",), "lip must be [z, zeta, r, rho]")
    C = doc.get(path + ("C",), 1.0, _NUM) if isinstance(doc.get(path), dict) else 1.0
    loc_raw = doc.get(path + ("locality",), "global") if isinstance(doc.get(path), dict) else "global"
    if loc_raw == "global":
        locality = None
    elif isinstance(loc_raw, dict):
        radius = loc_raw.get("radius", 1.0)
        if not isinstance(radius, _NUM) or radius <= 0:
            doc.error(path + ("locality", "radius"), "radius must be a positive number")
        locality = Locality(float(radius))
    else:
        doc.error(path + ("locality",), "locality is 'global' or {radius: R}")
    try:
        return NemytskiiFn.from_expr(expr, dim, tuple(lip), float(C), locality)
    except ExpressionError as exc:
        doc.error(path + ("expr",) if isinstance(doc.get(path), dict) else path, str(exc))
    except ValueError as exc:
        doc.error(path, str(exc))


def parse_manifest(text: str, source: str = "<manifest>", overrides: dict | None = None) -> RunManifest:
    doc = _Doc(text, source)
    gd = ("grid",)
    dim = doc.get(gd + ("dim",), 1, int)
    try:
        grid = Grid(dim, doc.get(gd + ("n_points",), 64, int),
                    float(doc.get(gd + ("half_width",), 8.0, _NUM)))
    except ValueError as exc:
        doc.error(gd, str(exc))

    pr = ("problem",)
    T = float(doc.get(pr + ("T",), types=_NUM))
    gen_path = pr + ("generator",)
    order = _pair(doc, gen_path + ("order",))
    hypo = _pair(doc, gen_path + ("hypo_order",), None)
    try:
        generator = SgSymbol.from_expr(doc.get(gen_path + ("symbol",), types=str), dim, order, hypo, T)
    except ExpressionError as exc:
        doc.error(gen_path + ("symbol",), str(exc))
    except ValueError as exc:
        doc.error(gen_path, str(exc))

    idx_raw = _pair(doc, pr + ("index",), (0.0, 0.0))
    idx = SobolevKatoIndex(*idx_raw)
    kappa = float(doc.get(pr + ("kappa",), 0.0, _NUM))
    lam = float(doc.get(pr + ("lambda",), 0.0, _NUM))
    for name, val in (("kappa", kappa), ("lambda", lam)):
        if not 0 <= val < 0.5:
            doc.error(pr + (name,), f"{'λ' if name == 'lambda' else 'κ'} ∉ [0,1/2) (got {val:g})",
                      HypothesisError)
    kappa_m = kappa * (hypo[0] if hypo else 0.0)
    gamma = _nonlinearity(doc, pr + ("gamma",), dim, idx, kappa_m)
    sigma = _nonlinearity(doc, pr + ("sigma",), dim, idx, kappa_m)

    u0_expr = str(doc.get(pr + ("u0",), "0", (str, int, float)))
    try:
        ex = parse_expression(u0_expr, dim, ("x",))
        u0_vals = np.broadcast_to(ex(x=grid.x), grid.shape)
        u0 = grid.field(u0_vals)
    except ExpressionError as exc:
        doc.error(pr + ("u0",), str(exc))
    except ValueError as exc:
        doc.error(pr + ("u0",), str(exc))
    if doc.get(pr + ("measure",), None) is None:
        doc.error(pr + ("measure",), "missing required entry")
    measure = parse_measure(doc, dim, pr + ("measure",))
    if gamma.locality is not None or sigma.locality is not None:
        gamma = _attach(gamma, u0)
        sigma = _attach(sigma, u0)
    try:
        spec = CauchyProblemSpec(generator, gamma, sigma, u0, measure, T, idx, kappa, lam)
    except HypothesisError as exc:
        doc.error(pr, str(exc), HypothesisError)
    except ValueError as exc:
        doc.error(pr, str(exc))

    cf = ("config",)
    cfg = dict(
        dt=float(doc.get(cf + ("dt",), types=_NUM)),
        K=doc.get(cf + ("K",), 16, int),
        tol=float(doc.get(cf + ("tol",), 1e-8, _NUM)),
        max_iter=doc.get(cf + ("max_iter",), 50, int),
        paths=doc.get(cf + ("paths",), 1, int),
        seed=doc.get(cf + ("seed",), 0, int),
        threads=doc.get(cf + ("threads",), 1, int),
        symmetry=doc.get(cf + ("symmetry",), "hermitian", str),
    )
    for k, v in (overrides or {}).items():
        if v is not None:
            cfg[k] = v
    try:
        config = SolverConfig(**cfg)
    except ValueError as exc:
        doc.error(cf, str(exc))
    options = {k: v for k, v in doc.data.items() if k not in ("grid", "problem", "config")}
    return RunManifest(spec, config, options, doc.data, source)


def _attach(g: NemytskiiFn, u0) -> NemytskiiFn:
    if g.locality is None or g.locality.center is not None:
        return g
    return NemytskiiFn(g.func, g.lip_params, g.C, g.locality.with_center(u0), g.dim, g.name,
                       g.depends_on_u, g.depends_on_t)


def load_manifest(path, overrides: dict | None = None) -> RunManifest:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ManifestError(f"cannot read manifest: {exc.strerror}", source=str(p)) from None
    return parse_manifest(text, str(p), overrides)
