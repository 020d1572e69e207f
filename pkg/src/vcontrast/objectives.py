"""Preference and visual-contrastive losses over log-probability bundles.

Every loss takes :class:`LogProbBundle` values whose fields are scalars or
equal-length batch vectors, and returns the batch mean as a scalar Tensor.
Reference entries are detached, so no gradient ever reaches them.

Bundle slots are named after the pair's images: ``iw`` holds the image the
pair labels as winning, ``il`` the other one, ``noimg`` the image-free
condition. For a bundle scored on ``y_l`` the matching image sits in ``il``;
:func:`flip` moves it to ``iw``.
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LN2 = float(np.log(2.0))


@dataclass(frozen=True)
class Betas:
    beta: float = 0.1
    beta1: float = 0.1
    beta2: float = 0.1

    def __post_init__(self):
        for f in fields(self):
            if not getattr(self, f.name) > 0:
                raise ValueError(f"{f.name} must be positive, got {getattr(self, f.name)}")


@dataclass(frozen=True)
class LogProbBundle:
    """Log-probabilities (nats) of one response under three conditions, two models."""

    pol_iw: Tensor
    pol_il: Tensor
    pol_noimg: Tensor
    ref_iw: Tensor
    ref_il: Tensor
    ref_noimg: Tensor

    def __post_init__(self):
        shape = None
        for f in fields(self):
            v = getattr(self, f.name)
            if not isinstance(v, Tensor):
                v = Tensor(v)
                object.__setattr__(self, f.name, v)
            d = v.data
            if not (np.isfinite(d).all() and (d <= 0).all()):
                raise ValueError(f"{f.name} must be finite and <= 0")
            if shape is None:
                shape = v.shape
            elif v.shape != shape:
                raise ValueError("all bundle entries must share one shape")


def flip(bundle: LogProbBundle) -> LogProbBundle:
    """Exchange the two image slots (the role switch of the symmetric loss)."""
    return LogProbBundle(bundle.pol_il, bundle.pol_iw, bundle.pol_noimg,
                         bundle.ref_il, bundle.ref_iw, bundle.ref_noimg)


# Relabeling the pair's images and flipping roles are the same slot exchange.
exchange = flip


def _ratio(policy: Tensor, reference: Tensor) -> Tensor:
    return policy - reference.detach()


def _sigmoid_loss(margin: Tensor) -> Tensor:
    # -log σ(m) == softplus(-m)
    return ad.mean(ad.softplus(-margin))


def dpo_loss(bundle_w: LogProbBundle, bundle_l: LogProbBundle, betas: Betas = Betas()) -> Tensor:
    """Response preference under the shared image (the ``iw`` slot of both bundles)."""
    margin = betas.beta * (_ratio(bundle_w.pol_iw, bundle_w.ref_iw)
                           - _ratio(bundle_l.pol_iw, bundle_l.ref_iw))
    return _sigmoid_loss(margin)


def viscon_loss(bundle_w: LogProbBundle, betas: Betas = Betas()) -> Tensor:
    """Image preference: y_w should be likelier under i_w than under i_l."""
    margin = betas.beta * (_ratio(bundle_w.pol_iw, bundle_w.ref_iw)
                           - _ratio(bundle_w.pol_il, bundle_w.ref_il))
    return _sigmoid_loss(margin)


def attend_loss(bundle: LogProbBundle, betas: Betas = Betas()) -> Tensor:
    """Matching image must beat the no-image condition."""
    margin = betas.beta1 * (_ratio(bundle.pol_iw, bundle.ref_iw)
                            - _ratio(bundle.pol_noimg, bundle.ref_noimg))
    return _sigmoid_loss(margin)


def reject_loss(bundle: LogProbBundle, betas: Betas = Betas()) -> Tensor:
    """The no-image condition must beat the contradicting image."""
    margin = betas.beta2 * (_ratio(bundle.pol_noimg, bundle.ref_noimg)
                            - _ratio(bundle.pol_il, bundle.ref_il))
    return _sigmoid_loss(margin)


def vco_loss(bundle: LogProbBundle, betas: Betas = Betas()) -> Tensor:
    return attend_loss(bundle, betas) + reject_loss(bundle, betas)


def svco_loss(bundle_w: LogProbBundle, bundle_l: LogProbBundle, betas: Betas = Betas()) -> Tensor:
    """One-sided contrastive loss on y_w plus its role-flipped twin on y_l."""
    return vco_loss(bundle_w, betas) + vco_loss(flip(bundle_l), betas)


def sft_loss(bundle: LogProbBundle, side: str = "w_on_iw") -> Tensor:
    """Negative policy log-likelihood of the response under its own image."""
    if side == "w_on_iw":
        return -ad.mean(bundle.pol_iw)
    if side == "l_on_il":
        return -ad.mean(bundle.pol_il)
    raise ValueError(f"side must be 'w_on_iw' or 'l_on_il', got {side!r}")


AnchorHook = Callable[[LogProbBundle, LogProbBundle, Betas], Tensor]


def mdpo_loss(bundle_w: LogProbBundle, bundle_l: LogProbBundle, betas: Betas = Betas(),
              anchor: AnchorHook | None = None) -> Tensor:
    """Response DPO plus the image-conditional term.

    ``anchor`` may add an absolute-reward regularizer; none is applied by
    default because its form is not fixed here.
    """
    loss = dpo_loss(bundle_w, bundle_l, betas) + viscon_loss(bundle_w, betas)
    if anchor is not None:
        loss = loss + anchor(bundle_w, bundle_l, betas)
    return loss


def sft2_loss(bundle_w: LogProbBundle, bundle_l: LogProbBundle) -> Tensor:
    """SFT on both sides of every pair; the batch mean runs over 2B terms."""
    return 0.5 * (sft_loss(bundle_w, "w_on_iw") + sft_loss(bundle_l, "l_on_il"))


OBJECTIVES: dict[str, Callable[[LogProbBundle, LogProbBundle, Betas], Tensor]] = {
    "svco": svco_loss,
    "vco": lambda bw, bl, betas: vco_loss(bw, betas),
    "dpo": dpo_loss,
    "viscon": lambda bw, bl, betas: viscon_loss(bw, betas),
    "mdpo": mdpo_loss,
    "sft2": lambda bw, bl, betas: sft2_loss(bw, bl),
}


def objective_loss(name: str, bundle_w: LogProbBundle, bundle_l: LogProbBundle,
                   betas: Betas = Betas()) -> Tensor:
    try:
        fn = OBJECTIVES[name]
    except KeyError:
        raise ValueError(f"unknown objective {name!r}; valid: {', '.join(OBJECTIVES)}") from None
    return fn(bundle_w, bundle_l, betas)
