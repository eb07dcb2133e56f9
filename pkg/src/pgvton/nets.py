"""Small backbones shared by the trainable modules."""

import torch
import torch.nn as nn
import torch.nn.functional as F


def conv_block(cin, cout):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1),
        nn.GroupNorm(min(4, cout), cout),
        nn.LeakyReLU(0.2),
        nn.Conv2d(cout, cout, 3, padding=1),
        nn.GroupNorm(min(4, cout), cout),
        nn.LeakyReLU(0.2),
    )


class UNet(nn.Module):
    """Encoder-decoder with skip connections and ``len(widths) - 1`` downsamplings.

    Returns raw logits; callers attach their own output normalisation.
    """

    def __init__(self, in_channels, out_channels, widths=(16, 32, 64, 64), bottleneck=None):
        super().__init__()
        self.down = nn.ModuleList()
        cin = in_channels
        for w in widths:
            self.down.append(conv_block(cin, w))
            cin = w
        self.bottleneck = bottleneck
        self.up = nn.ModuleList()
        for w_skip in reversed(widths[:-1]):
            self.up.append(conv_block(cin + w_skip, w_skip))
            cin = w_skip
        self.head = nn.Conv2d(cin, out_channels, 1)

    def forward(self, x):
        skips = []
        for i, block in enumerate(self.down):
            if i > 0:
                x = F.avg_pool2d(x, 2)
            x = block(x)
            skips.append(x)
        if self.bottleneck is not None:
            x = self.bottleneck(x)
        for block, skip in zip(self.up, reversed(skips[:-1])):
            x = F.interpolate(x, size=skip.shape[-2:], mode="bilinear", align_corners=False)
            x = block(torch.cat([x, skip], dim=1))
        return self.head(x)


class SelfAttention2d(nn.Module):
    """Pre-norm global self-attention over all spatial positions, plus an MLP."""

    def __init__(self, channels, heads=4):
        super().__init__()
        self.norm1 = nn.LayerNorm(channels)
        self.attn = nn.MultiheadAttention(channels, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(channels)
        self.mlp = nn.Sequential(nn.Linear(channels, 2 * channels), nn.GELU(), nn.Linear(2 * channels, channels))

    def forward(self, x):
        b, c, h, w = x.shape
        t = x.flatten(2).transpose(1, 2)
        n = self.norm1(t)
        t = t + self.attn(n, n, n, need_weights=False)[0]
        t = t + self.mlp(self.norm2(t))
        return t.transpose(1, 2).reshape(b, c, h, w)
