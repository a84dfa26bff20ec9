"""Patch discriminator plus the text-domain head feeding the realism reward.

The patch trunk scores the composited prediction at H/8 resolution
(least-squares GAN, raw scores). The text head reads the generator's
refinement bottleneck and predicts, per pixel, whether it belongs to an
original-text region; during reward evaluation the same head is read the
opposite way: synthetic text that the head mistakes for original text
earns a high realism reward.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .errors import InvalidArgumentError
from .models import dice_loss


@dataclass
class DiscriminatorOutput:
    patch_scores: nn.Tensor   # (B, 1, H/8, W/8), unbounded
    text_map: nn.Tensor       # (B, 1, H, W), sigmoid-bounded


class Discriminator:
    def __init__(self, channels=(16, 32, 64), g_feat_channels=64, rng=None, dtype=np.float32):
        self.params = nn.ParamSet()
        rng = rng or np.random.default_rng(0)
        c1, c2, c3 = channels

        def conv(name, cout, cin, k=3):
            self.params.add(f"{name}_w", nn.conv_init(rng, cout, cin, k), dtype=dtype)
            self.params.add(f"{name}_b", np.zeros(cout), dtype=dtype)

        conv("p_d1", c1, 3)
        conv("p_d2", c2, c1)
        conv("p_d3", c3, c2)
        conv("p_score", 1, c3, k=1)
        conv("t_c1", 32, g_feat_channels)
        conv("t_c2", 1, 32)

    def _conv(self, name, x, stride=1):
        return nn.conv2d(x, self.params[f"{name}_w"], self.params[f"{name}_b"], stride=stride)

    def patch_scores(self, img):
        """Patch trunk only; ``img`` is (B,3,H,W)."""
        img = nn.as_tensor(img)
        if img.data.ndim != 4 or img.shape[1] != 3:
            raise InvalidArgumentError(f"discriminator input must be (B,3,H,W), got {img.shape}")
        x = nn.leaky_relu(self._conv("p_d1", img, stride=2))
        x = nn.leaky_relu(self._conv("p_d2", x, stride=2))
        x = nn.leaky_relu(self._conv("p_d3", x, stride=2))
        return self._conv("p_score", x)

    def text_map(self, g_feat):
        """Text head: two convs on the generator feature map, upsampled x8."""
        g_feat = nn.as_tensor(g_feat)
        x = nn.leaky_relu(self._conv("t_c1", g_feat))
        x = nn.sigmoid(self._conv("t_c2", x))
        for _ in range(3):
            x = nn.upsample2x(x)
        return x

    def d_forward(self, i_pred, g_feat) -> DiscriminatorOutput:
        return DiscriminatorOutput(self.patch_scores(i_pred), self.text_map(g_feat))


def d_text_loss(text_map, orig_mask, syn_mask):
    """Dice against the original-text mask; synthetic regions count as background.

    Masks must be disjoint: the synthetic instance never overlaps original
    text, so a pixel is either original text (target 1) or not (target 0).
    """
    orig = np.asarray(orig_mask.data if isinstance(orig_mask, nn.Tensor) else orig_mask)
    syn = np.asarray(syn_mask.data if isinstance(syn_mask, nn.Tensor) else syn_mask)
    if (orig * syn).sum() > 0:
        raise InvalidArgumentError("original and synthetic masks must be disjoint")
    return dice_loss(text_map, orig_mask)


def lsgan_losses(real_scores, fake_scores):
    """Least-squares GAN objectives: (discriminator loss, generator loss)."""
    real = nn.as_tensor(real_scores)
    fake = nn.as_tensor(fake_scores)
    d_loss = nn.add(
        nn.mul(nn.mean_all(nn.pow_const(nn.sub(real, 1.0), 2)), 0.5),
        nn.mul(nn.mean_all(nn.pow_const(fake, 2)), 0.5),
    )
    g_loss = nn.mul(nn.mean_all(nn.pow_const(nn.sub(fake, 1.0), 2)), 0.5)
    return d_loss, g_loss


def r_real(text_map, syn_mask):
    """Style realism reward: negative dice between D_text output and M_syn.

    Evaluated on a frozen snapshot; gradient-free by construction.
    """
    tm = text_map.data if isinstance(text_map, nn.Tensor) else np.asarray(text_map)
    m = syn_mask.data if isinstance(syn_mask, nn.Tensor) else np.asarray(syn_mask)
    with nn.no_grad():
        return -dice_loss(nn.Tensor(tm), nn.Tensor(m)).item()
