"""Color spaces, the seeded color encoder MLP, and gated geometry/color fusion."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass

import numpy as np

# sRGB (D65) linear RGB -> XYZ
_RGB2XYZ = np.array([
    [0.412453, 0.357580, 0.180423],
    [0.212671, 0.715160, 0.072169],
    [0.019334, 0.119193, 0.950227],
])
_XYZ2RGB = np.linalg.inv(_RGB2XYZ)
_D65 = np.array([0.95047, 1.0, 1.08883])
_EPS_LAB = (6.0 / 29.0) ** 3
LAB_AB_SCALE = 128.0


class ColorSpace(str, enum.Enum):
    RGB = "rgb"
    HSV = "hsv"  # indoor scenes
    LAB = "lab"  # outdoor scenes


def _check_gamut(rgb: np.ndarray):
    if np.any(~np.isfinite(rgb)) or np.any(rgb < 0.0) or np.any(rgb > 1.0):
        raise ValueError("color out of gamut")


def rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    rgb = np.asarray(rgb, dtype=float)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    maxc = rgb.max(axis=-1)
    minc = rgb.min(axis=-1)
    delta = maxc - minc
    s = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1.0), 0.0)
    safe = np.where(delta > 0, delta, 1.0)
    rc, gc, bc = (maxc - r) / safe, (maxc - g) / safe, (maxc - b) / safe
    h = np.where(r == maxc, bc - gc, np.where(g == maxc, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(delta > 0, (h / 6.0) % 1.0, 0.0)
    return np.stack([h, s, maxc], axis=-1)


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    hsv = np.asarray(hsv, dtype=float)
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p, q, t = v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f))
    i = i.astype(int) % 6
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b], axis=-1)


def _lab_f(t):
    return np.where(t > _EPS_LAB, np.cbrt(t), t / (3 * (6.0 / 29.0) ** 2) + 4.0 / 29.0)


def _lab_finv(f):
    return np.where(f > 6.0 / 29.0, f**3, 3 * (6.0 / 29.0) ** 2 * (f - 4.0 / 29.0))


def rgb_to_lab(rgb: np.ndarray) -> np.ndarray:
    """sRGB -> CIE LAB (D65), scaled to L in [0, 1] and a, b in about [-1, 1]."""
    rgb = np.asarray(rgb, dtype=float)
    lin = np.where(rgb > 0.04045, ((rgb + 0.055) / 1.055) ** 2.4, rgb / 12.92)
    xyz = lin @ _RGB2XYZ.T / _D65
    fx, fy, fz = (_lab_f(xyz[..., i]) for i in range(3))
    L = 116.0 * fy - 16.0
    a = 500.0 * (fx - fy)
    b = 200.0 * (fy - fz)
    return np.stack([L / 100.0, a / LAB_AB_SCALE, b / LAB_AB_SCALE], axis=-1)


def lab_to_rgb(lab: np.ndarray) -> np.ndarray:
    lab = np.asarray(lab, dtype=float)
    L = lab[..., 0] * 100.0
    a = lab[..., 1] * LAB_AB_SCALE
    b = lab[..., 2] * LAB_AB_SCALE
    fy = (L + 16.0) / 116.0
    fx = fy + a / 500.0
    fz = fy - b / 200.0
    xyz = np.stack([_lab_finv(fx), _lab_finv(fy), _lab_finv(fz)], axis=-1) * _D65
    lin = xyz @ _XYZ2RGB.T
    lin = np.clip(lin, 0.0, None)
    return np.where(lin > 0.0031308, 1.055 * lin ** (1 / 2.4) - 0.055, 12.92 * lin)


def convert_color(c, target: ColorSpace | str) -> np.ndarray:
    """Convert RGB (last axis of length 3, channels in [0, 1]) to ``target``."""
    rgb = np.asarray(c, dtype=float)
    _check_gamut(rgb)
    target = ColorSpace(target)
    if target is ColorSpace.HSV:
        return rgb_to_hsv(rgb)
    if target is ColorSpace.LAB:
        return rgb_to_lab(rgb)
    return rgb.copy()


def convert_to_rgb(c, source: ColorSpace | str) -> np.ndarray:
    source = ColorSpace(source)
    if source is ColorSpace.HSV:
        return hsv_to_rgb(c)
    if source is ColorSpace.LAB:
        return lab_to_rgb(c)
    return np.asarray(c, dtype=float).copy()


def hue_vector(rgb: np.ndarray, circular: bool = False) -> np.ndarray:
    """Hue representation used by the color-distance embedding.

    Hue is treated as a plain scalar coordinate by default; ``circular=True``
    maps it to (cos, sin) so that 0.99 and 0.01 are neighbors.
    """
    h = rgb_to_hsv(np.asarray(rgb, dtype=float))[..., 0]
    if circular:
        return np.stack([np.cos(2 * np.pi * h), np.sin(2 * np.pi * h)], axis=-1)
    return h[..., None]


@dataclass
class ColorEncoderParams:
    W1: np.ndarray
    W2: np.ndarray
    W3: np.ndarray
    biases: list
    ln_scale: list
    ln_shift: list
    seed: int | None = None

    @classmethod
    def from_seed(cls, seed: int, d_out: int = 8, d_in: int = 3, d_hidden: int | None = None):
        d_hidden = d_hidden or d_out
        rng = np.random.default_rng(seed)
        W1 = rng.normal(0.0, 1.0 / np.sqrt(d_in), (d_in, d_hidden))
        W2 = rng.normal(0.0, 1.0 / np.sqrt(d_hidden), (d_hidden, d_hidden))
        W3 = rng.normal(0.0, 1.0 / np.sqrt(d_hidden), (d_hidden, d_out))
        widths = (d_hidden, d_hidden, d_out)
        # without a bias, black maps to an all-zero pre-norm vector where layer norm amplifies by 1/sqrt(eps)
        biases = [rng.normal(0.0, 1.0, w) for w in widths]
        return cls(W1, W2, W3, biases,
                   [np.ones(w) for w in widths], [np.zeros(w) for w in widths], seed)

    @property
    def d_in(self) -> int:
        return self.W1.shape[0]

    @property
    def d_out(self) -> int:
        return self.W3.shape[1]

    def to_json(self) -> str:
        return json.dumps({
            "seed": self.seed,
            "W1": self.W1.tolist(), "W2": self.W2.tolist(), "W3": self.W3.tolist(),
            "biases": [np.asarray(b).tolist() for b in self.biases],
            "ln_scale": [np.asarray(s).tolist() for s in self.ln_scale],
            "ln_shift": [np.asarray(s).tolist() for s in self.ln_shift],
        })

    @classmethod
    def from_json(cls, text: str) -> "ColorEncoderParams":
        d = json.loads(text)
        return cls(np.array(d["W1"]), np.array(d["W2"]), np.array(d["W3"]), [np.array(b) for b in d["biases"]],
                   [np.array(s) for s in d["ln_scale"]], [np.array(s) for s in d["ln_shift"]],
                   d.get("seed"))


def layer_norm(x: np.ndarray, scale, shift, eps: float = 1e-5) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * scale + shift


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def encode_color(c, params: ColorEncoderParams) -> np.ndarray:
    """Three affine (weight plus bias) + layer-norm stages; ReLU on the hidden two, sigmoid at the output.

    Accepts a single color or an (N, d_in) batch.
    """
    x = np.asarray(c, dtype=float)
    if x.shape[-1] != params.d_in:
        raise ValueError(f"expected input dimension {params.d_in}, got {x.shape[-1]}")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite color input")
    b = params.biases
    h = np.maximum(layer_norm(x @ params.W1 + b[0], params.ln_scale[0], params.ln_shift[0]), 0.0)
    h = np.maximum(layer_norm(h @ params.W2 + b[1], params.ln_scale[1], params.ln_shift[1]), 0.0)
    return _sigmoid(layer_norm(h @ params.W3 + b[2], params.ln_scale[2], params.ln_shift[2]))


@dataclass(frozen=True)
class FusionGate:
    omega: float = 0.0

    @property
    def alpha(self) -> float:
        return float(_sigmoid(self.omega))


def fuse_features(F_g, F_c, gate: FusionGate, level: int, L: int) -> np.ndarray:
    """Concatenate geometric and color features; the color block is gated below the top level."""
    if not 1 <= level <= L:
        raise ValueError(f"level must lie in [1, {L}]")
    F_g = np.asarray(F_g, dtype=float)
    F_c = np.asarray(F_c, dtype=float)
    if level < L:
        F_c = gate.alpha * F_c
    return np.concatenate([F_g, F_c], axis=-1)
