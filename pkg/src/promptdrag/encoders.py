"""Image/text dual encoder used for prompt-guided losses.

The editing losses compare an image embedding against a text embedding in
one shared space.  Any encoder pair with that property plugs in through
DualEncoderInterface; the toy implementation below is a small deterministic
convnet plus a hash-seeded bag-of-tokens text side, which is enough for
desk-scale tests of every loss and gradient path.
"""

from __future__ import annotations

import torch
import torch.nn as nn

from .diffusion import _prompt_vector


class EncoderError(RuntimeError):
    """Raised when an encoder cannot produce a usable embedding."""


class DualEncoderInterface(nn.Module):
    """Contract for paired image/text encoders sharing one embedding space.

    Implementations must be deterministic and must return finite, nonzero
    embeddings for nonempty inputs.  encode_image must be differentiable
    with respect to the image so guidance gradients can flow through it.
    """

    @property
    def embed_dim(self) -> int:
        raise NotImplementedError

    def encode_image(self, image: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def encode_text(self, prompt: str) -> torch.Tensor:
        raise NotImplementedError


class ToyDualEncoder(DualEncoderInterface):
    """Deterministic desk-scale stand-in for a pretrained dual encoder.

    The image tower is three tanh conv stages with two downsamplings and a
    linear head over globally pooled features.  The text tower hashes each
    token to a fixed pseudo-random vector and averages, so equal prompts
    always embed equally without any vocabulary file.  Weights are seeded,
    never trained; the losses only need a deterministic, differentiable
    embedding, not a semantically meaningful one.
    """

    def __init__(self, seed: int, channels: int = 3, hidden: int = 8, dim: int = 32):
        super().__init__()
        if channels < 1 or hidden < 1 or dim < 1:
            raise ValueError("channels, hidden and dim must be positive")
        self.seed = seed
        self.channels = channels
        self.hidden = hidden
        self.dim = dim
        self.conv1 = nn.Conv2d(channels, hidden, 3, padding=1)
        self.conv2 = nn.Conv2d(hidden, hidden * 2, 3, stride=2, padding=1)
        self.conv3 = nn.Conv2d(hidden * 2, hidden * 2, 3, stride=2, padding=1)
        self.head = nn.Linear(hidden * 2, dim)
        self.double()
        self._init_weights(seed)
        for p in self.parameters():
            p.requires_grad_(False)

    def _init_weights(self, seed: int) -> None:
        generator = torch.Generator().manual_seed(seed)
        for name, p in sorted(self.named_parameters()):
            if p.dim() > 1:
                fan_in = p[0].numel()
                init = torch.randn(p.shape, generator=generator, dtype=torch.float64)
                p.data.copy_(init / fan_in**0.5)
            else:
                p.data.zero_()

    @property
    def embed_dim(self) -> int:
        return self.dim

    def image_features(self, image: torch.Tensor) -> list[torch.Tensor]:
        """Per-stage activation maps, coarse to fine usable for perceptual metrics."""
        if image.dim() != 3 or image.shape[0] != self.channels:
            raise EncoderError(
                f"expected image of shape ({self.channels}, H, W), got {tuple(image.shape)}"
            )
        x = image.unsqueeze(0).to(torch.float64)
        f1 = torch.tanh(self.conv1(x))
        f2 = torch.tanh(self.conv2(f1))
        f3 = torch.tanh(self.conv3(f2))
        return [f1.squeeze(0), f2.squeeze(0), f3.squeeze(0)]

    def encode_image(self, image: torch.Tensor) -> torch.Tensor:
        f3 = self.image_features(image)[-1]
        pooled = f3.mean(dim=(1, 2))
        out = self.head(pooled)
        if not torch.isfinite(out).all():
            raise EncoderError("image embedding is not finite")
        return out

    def encode_text(self, prompt: str) -> torch.Tensor:
        if not prompt.split():
            raise EncoderError("cannot embed an empty prompt")
        # decorrelate from the denoiser's conditioning vectors for the same seed
        return _prompt_vector(prompt, self.dim, salt=self.seed + 7919)


def save_encoder(path, encoder: ToyDualEncoder) -> None:
    torch.save(
        {
            "kind": "toy-dual-encoder",
            "seed": encoder.seed,
            "channels": encoder.channels,
            "hidden": encoder.hidden,
            "dim": encoder.dim,
            "weights": encoder.state_dict(),
        },
        path,
    )


def load_encoder(path) -> ToyDualEncoder:
    payload = torch.load(path, weights_only=True)
    if payload.get("kind") != "toy-dual-encoder":
        raise EncoderError(f"not a dual encoder checkpoint: {path}")
    encoder = ToyDualEncoder(
        seed=payload["seed"],
        channels=payload["channels"],
        hidden=payload["hidden"],
        dim=payload["dim"],
    )
    encoder.load_state_dict(payload["weights"])
    return encoder
