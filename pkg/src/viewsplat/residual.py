"""Residual color prediction from pooled cross-view features.

The rasterized base image carries the smooth, low-frequency appearance; what
it misses (sharp texture, highlights that move with the camera) is visible in
the neighboring captures.  A tiny per-pixel network turns each source view's
color difference and camera geometry into a feature vector, a max-pool folds
any number of views into one map, and a small convolutional decoder reads the
pooled map alongside the base image and ray directions to produce an additive
color correction.  The decoder's final layer starts at zero, so an untrained
network leaves the base image untouched.
"""

from __future__ import annotations

import os

import numpy as np

from . import autodiff as ad
from .autodiff import Value, as_value, constant

__all__ = [
    "FEATURE_DIM", "DECODER_LAYERS", "DECODER_IN", "VIEW_FEATURE_IN",
    "PARAM_SPECS", "ResidualNet", "view_feature", "extract_and_pool",
    "decode_residual", "compose_final",
]

VIEW_FEATURE_IN = 7    # color difference (3) + camera geometry (4)
FEATURE_DIM = 32
DECODER_LAYERS = 9
DECODER_IN = 38        # base color (3) + ray direction (3) + pooled (32)


def _decoder_specs():
    specs = []
    cin = DECODER_IN
    for i in range(1, DECODER_LAYERS + 1):
        cout = 3 if i == DECODER_LAYERS else FEATURE_DIM
        specs.append((f"dec_w{i}", (3, 3, cin, cout)))
        specs.append((f"dec_b{i}", (cout,)))
        cin = cout
    return specs


PARAM_SPECS: list[tuple[str, tuple[int, ...]]] = [
    ("feat_w1", (VIEW_FEATURE_IN, FEATURE_DIM)),
    ("feat_b1", (FEATURE_DIM,)),
    ("feat_w2", (FEATURE_DIM, FEATURE_DIM)),
    ("feat_b2", (FEATURE_DIM,)),
] + _decoder_specs()


class ResidualNet:
    """Weight container with init, tape entry, and exact checkpointing."""

    def __init__(self, weights: dict):
        expected = dict(PARAM_SPECS)
        missing = sorted(set(expected) - set(weights))
        extra = sorted(set(weights) - set(expected))
        if missing or extra:
            raise ValueError(f"ResidualNet: missing {missing}, unexpected {extra}")
        self.weights = {}
        for name, shape in PARAM_SPECS:
            arr = np.asarray(weights[name], dtype=np.float64)
            if arr.shape != shape:
                raise ValueError(
                    f"ResidualNet: {name} has shape {arr.shape}, expected {shape}"
                )
            self.weights[name] = arr.copy()

    @classmethod
    def initialize(cls, rng: np.random.Generator) -> "ResidualNet":
        """He-uniform weights for the ReLU layers, zeros for the last layer.

        Zeroing the final convolution makes the initial residual exactly zero
        everywhere, so training starts from the plain rasterized image.
        """
        weights = {}
        for name, shape in PARAM_SPECS:
            is_bias = "_b" in name
            is_last = name == f"dec_w{DECODER_LAYERS}"
            if is_bias or is_last:
                weights[name] = np.zeros(shape)
            else:
                fan_in = int(np.prod(shape[:-1]))
                limit = np.sqrt(6.0 / fan_in)
                weights[name] = rng.uniform(-limit, limit, size=shape)
        return cls(weights)

    def parameter_values(self, tape) -> dict:
        """Tape leaves for training, or constants for forward-only use."""
        if tape is None:
            return {name: constant(arr) for name, arr in self.weights.items()}
        return {name: tape.leaf(arr) for name, arr in self.weights.items()}

    def n_parameters(self) -> int:
        return sum(arr.size for arr in self.weights.values())

    def save(self, path: str) -> None:
        """Flat float64 binary at ``path`` plus a text manifest at ``path``.txt."""
        blob = np.concatenate(
            [self.weights[name].ravel() for name, _ in PARAM_SPECS]
        )
        with open(path, "wb") as fh:
            fh.write(blob.astype("<f8").tobytes())
        with open(path + ".txt", "w") as fh:
            fh.write("# residual network weights: float64 little-endian, row-major,\n")
            fh.write("# concatenated in the order listed below\n")
            for name, shape in PARAM_SPECS:
                fh.write(f"{name} {' '.join(str(s) for s in shape)}\n")

    @classmethod
    def load(cls, path: str) -> "ResidualNet":
        manifest = path + ".txt"
        if not os.path.exists(manifest):
            raise FileNotFoundError(f"weight manifest not found: {manifest}")
        listed = []
        with open(manifest) as fh:
            for line in fh:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                name, *dims = line.split()
                listed.append((name, tuple(int(d) for d in dims)))
        if listed != PARAM_SPECS:
            raise ValueError(f"weight manifest {manifest} does not match this network")
        blob = np.frombuffer(open(path, "rb").read(), dtype="<f8")
        total = sum(int(np.prod(shape)) for _, shape in PARAM_SPECS)
        if blob.size != total:
            raise ValueError(
                f"weight file {path} holds {blob.size} values, expected {total}"
            )
        weights, at = {}, 0
        for name, shape in PARAM_SPECS:
            n = int(np.prod(shape))
            weights[name] = blob[at:at + n].reshape(shape)
            at += n
        return cls(weights)


def view_feature(params: dict, dc: Value, dd: Value) -> Value:
    """One source view's (P, 7) inputs to its (P, 32) feature rows."""
    x = ad.concat([dc, dd], axis=1)
    mid = ad.relu(x @ params["feat_w1"] + params["feat_b1"])
    return ad.relu(mid @ params["feat_w2"] + params["feat_b2"])


def extract_and_pool(params: dict, views, n_pixels: int) -> Value:
    """Componentwise max of per-view features over the valid views.

    ``views`` is a sequence of (dc, dd, valid) triples: (P, 3) and (P, 4)
    Values plus a (P,) bool mask.  Features are non-negative (they leave a
    ReLU), so zeroing a masked view's rows and max-pooling is the same as
    excluding them; pixels with no valid view pool to the zero vector.
    """
    feats = [
        view_feature(params, dc, dd) * np.asarray(valid, dtype=bool)[:, None]
        for dc, dd, valid in views
    ]
    if not feats:
        return constant(np.zeros((n_pixels, FEATURE_DIM)))
    if len(feats) == 1:
        return feats[0]
    return ad.reduce_max(ad.stack(feats, axis=0), axis=0)


def decode_residual(params: dict, base: Value, rays, pooled: Value) -> Value:
    """Nine 3x3 zero-padded convolutions from (H, W, 38) down to (H, W, 3).

    Every layer but the last is followed by a ReLU; the last stays linear so
    corrections can be negative.  Zero padding preserves the image size.
    """
    x = ad.concat([base, as_value(rays), pooled], axis=2)
    for i in range(1, DECODER_LAYERS + 1):
        x = ad.conv2d(x, params[f"dec_w{i}"], params[f"dec_b{i}"])
        if i < DECODER_LAYERS:
            x = ad.relu(x)
    return x


def compose_final(base: Value, residual: Value) -> Value:
    """Corrected image: base plus predicted residual, unclamped."""
    return base + residual
