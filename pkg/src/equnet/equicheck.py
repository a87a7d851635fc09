"""End-to-end equivariance certificates for segmentation models.

The model output is a plain (group-pooled) map, so for every group element
``g`` we expect ``f(g . x) == g . f(x)``.  The defect is

    max |f(g . x) - g . f(x)| / max |f(x)|

over a batch of random probes.  Elements that permute the pixel grid are
certified against a tolerance; 45-degree elements of C8 are measured on
smooth disk-masked probes and only reported.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .groups import SymmetryGroup, act_on_feature_map
from .tensor import Tensor, no_grad

TOLERANCE = {"f64": 1e-10, "f32": 1e-4}
DTYPES = {"f64": np.float64, "f32": np.float32}


@dataclass
class ElementDefect:
    element: str
    angle: float
    flip: bool
    exact: bool
    defect: float
    passed: bool | None  # None when not asserted


@dataclass
class Certificate:
    family: str
    precision: str
    n_probes: int
    tolerance: float
    exact: list[ElementDefect] = field(default_factory=list)
    approximate: list[ElementDefect] = field(default_factory=list)
    status: str = ""

    @property
    def certified(self) -> bool:
        return self.status == "certified"

    def render(self) -> str:
        lines = [
            f"family: {self.family}  precision: {self.precision}  probes: {self.n_probes}  "
            f"tolerance: {self.tolerance:.0e}",
        ]
        if self.family == "vanilla":
            lines.append("no guarantee: the model carries no symmetry constraint")
        lines.append("exact-grid elements:")
        for d in self.exact:
            mark = "n/a" if d.passed is None else ("ok" if d.passed else "FAIL")
            lines.append(f"  {d.element:<10} defect {d.defect:.3e}  {mark}")
        if self.approximate:
            lines.append("approximate (45 degree) elements, reported only:")
            for d in self.approximate:
                lines.append(f"  {d.element:<10} defect {d.defect:.3e}")
        lines.append(f"status: {self.status}")
        return "\n".join(lines)


def _forward(model, x: np.ndarray, batch_size: int = 8) -> np.ndarray:
    model.eval()
    outs = []
    with no_grad():
        for s in range(0, len(x), batch_size):
            outs.append(model(Tensor(x[s:s + batch_size], dtype=model.dtype)).data)
    return np.concatenate(outs).astype(np.float64)


def random_probes(n: int, channels: int, hw: int, seed: int = 0, dtype=np.float64) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n, channels, hw, hw)).astype(dtype)


def smooth_disk_probes(n: int, channels: int, hw: int, seed: int = 0, dtype=np.float64) -> np.ndarray:
    """Low-frequency probes that fade to zero outside a centred disk."""
    rng = np.random.default_rng(seed)
    x = ndimage.gaussian_filter(rng.standard_normal((n, channels, hw, hw)), sigma=(0, 0, 3, 3))
    x /= x.std()
    c = (hw - 1) / 2.0
    rr = np.hypot(*np.mgrid[0:hw, 0:hw] - c)
    taper = np.clip((0.45 * hw - rr) / (0.1 * hw), 0.0, 1.0)
    return (x * taper).astype(dtype)


def rotate_maps(x: np.ndarray, degrees: float) -> np.ndarray:
    """Bilinear counter-clockwise rotation about the map centre (last two axes)."""
    return ndimage.rotate(x, degrees, axes=(-1, -2), reshape=False, order=1, mode="constant")


def exact_defect(model, probes: np.ndarray, g, ref: np.ndarray | None = None) -> float:
    ref = _forward(model, probes) if ref is None else ref
    lhs = _forward(model, act_on_feature_map(g, probes))
    rhs = act_on_feature_map(g, ref)
    return float(np.abs(lhs - rhs).max() / np.abs(ref).max())


def approximate_defect(model, probes: np.ndarray, degrees: float, ref: np.ndarray | None = None) -> float:
    """Defect of a non-grid rotation, compared on the inner disk only."""
    ref = _forward(model, probes) if ref is None else ref
    lhs = _forward(model, rotate_maps(probes, degrees).astype(probes.dtype))
    rhs = rotate_maps(ref, degrees)
    hw = probes.shape[-1]
    c = (hw - 1) / 2.0
    inner = np.hypot(*np.mgrid[0:hw, 0:hw] - c) < 0.3 * hw
    return float(np.abs(lhs - rhs)[..., inner].max() / np.abs(ref[..., inner]).max())


def certify(model, n_probes: int = 8, precision: str = "f64", seed: int = 0) -> Certificate:
    """Measure the model's equivariance defect for every group element.

    Vanilla models are measured against the D4 elements and always report
    ``status = "not equivariant"`` (no guarantee, never a pass).
    """
    if precision not in TOLERANCE:
        raise ValueError(f"precision must be one of {sorted(TOLERANCE)}")
    if n_probes < 1:
        raise ValueError("need at least one probe")
    dtype = DTYPES[precision]
    model.astype(dtype)
    cfg = model.cfg
    tol = TOLERANCE[precision]
    cert = Certificate(cfg.family, precision, n_probes, tol)

    vanilla = cfg.family == "vanilla"
    group = SymmetryGroup("d4") if vanilla else model.group
    probes = random_probes(n_probes, cfg.in_channels, cfg.input_hw, seed, dtype)
    ref = _forward(model, probes)
    for g in group.elements[1:] if vanilla else group.elements:
        if not g.is_grid_exact:
            continue
        d = exact_defect(model, probes, g, ref)
        passed = None if vanilla else d < tol
        cert.exact.append(ElementDefect(repr(g), g.angle, g.flip, True, d, passed))

    odd = [g for g in group.elements if not g.is_grid_exact]
    if odd:
        smooth = smooth_disk_probes(n_probes, cfg.in_channels, cfg.input_hw, seed, dtype)
        sref = _forward(model, smooth)
        for g in odd:
            d = approximate_defect(model, smooth, g.angle, sref)
            cert.approximate.append(ElementDefect(repr(g), g.angle, g.flip, False, d, None))

    if vanilla:
        cert.status = "not equivariant"
    elif all(d.passed for d in cert.exact):
        cert.status = "certified"
    else:
        cert.status = "failed"
    return cert
