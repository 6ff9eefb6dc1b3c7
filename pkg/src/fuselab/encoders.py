"""Per-input feature extraction: a patch-MLP image encoder and dispatch over inputs."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import KINDS, Profile, Slot
from .pointops import encode_point_cloud
from .tensorops import ConfigurationError, ParamStore, Tensor, gelu, linear, mlp


class InputError(ValueError):
    pass


@dataclass
class ModalityInput:
    """One sensor observation; ``payload`` may carry a leading batch axis."""

    kind: str
    view: int
    payload: np.ndarray

    @property
    def slot(self) -> Slot:
        return Slot(self.kind, self.view)

    def batched(self) -> np.ndarray:
        base = 3 if self.kind == "image" else 2
        p = np.asarray(self.payload)
        return p[None] if p.ndim == base else p


@dataclass
class TokenSet:
    """Token matrix [B, n, d] from one input, tagged with its source."""

    values: Tensor
    kind: str
    view: int

    @property
    def slot(self) -> Slot:
        return Slot(self.kind, self.view)


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    B, H, W, C = images.shape
    if H % patch or W % patch:
        raise ConfigurationError(f"image {H}x{W} is not divisible into {patch}-pixel patches")
    gh, gw = H // patch, W // patch
    x = images.reshape(B, gh, patch, gw, patch, C).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(B, gh * gw, patch * patch * C)


def image_grid_features(images: np.ndarray, params: ParamStore, profile: Profile,
                        prefix: str = "image") -> tuple[Tensor, Tensor]:
    """Patch features [B, g, d_g] before dimension reduction, and the global vector."""
    imgs = np.asarray(images, dtype=params.dtype)
    if imgs.ndim == 3:
        imgs = imgs[None]
    if imgs.shape[1:] != (profile.image_size, profile.image_size, profile.image_channels):
        raise ConfigurationError(f"image shape {imgs.shape[1:]} does not match profile {profile.name}")
    patches = patchify(imgs, profile.patch)
    g = patches.shape[1]
    # per-patch bias doubles as a positional embedding
    e = linear(params, f"{prefix}.embed", patches, profile.d_global) \
        + params.get(f"{prefix}.patch_bias", (g, profile.d_global), "zeros")
    feats = mlp(params, f"{prefix}.pointwise", gelu(e), [profile.d_global, profile.d_global],
                final_act=True)
    # flattening keeps where on the grid each feature came from
    B = feats.shape[0]
    glob = mlp(params, f"{prefix}.global", feats.reshape(B, g * profile.d_global),
               [profile.d_global, profile.d_global])
    return feats, glob


def encode_image(images: np.ndarray, params: ParamStore, profile: Profile,
                 prefix: str = "image") -> tuple[Tensor, Tensor]:
    """Grid tokens [B, g, d_tok] and global feature [B, d_g] for a batch of images."""
    feats, glob = image_grid_features(images, params, profile, prefix)
    grid = mlp(params, f"{prefix}.reduce", feats, [profile.d_global, profile.d_tok])
    return grid, glob


def encode_all(inputs, params: ParamStore, profile: Profile, training: bool = False,
               rng: np.random.Generator | None = None) -> list[tuple[TokenSet, Tensor]]:
    """Encode every input; views of the same kind share one parameter subtree."""
    if not inputs:
        raise InputError("no inputs to encode")
    out = []
    for inp in inputs:
        if inp.kind not in KINDS:
            raise InputError(f"unknown modality kind {inp.kind!r}")
        payload = inp.batched()
        if inp.kind == "image":
            tokens, glob = encode_image(payload, params, profile)
        else:
            start = None
            if training and rng is not None:
                start = rng.integers(0, payload.shape[1], size=payload.shape[0])
            tokens, glob = encode_point_cloud(payload, params, inp.kind, profile, start=start, rng=rng)
        out.append((TokenSet(tokens, inp.kind, inp.view), glob))
    widths = {ts.values.shape[-1] for ts, _ in out}
    if widths != {profile.d_tok}:
        raise ConfigurationError(f"token widths {widths} differ from d_tok={profile.d_tok}")
    return out
