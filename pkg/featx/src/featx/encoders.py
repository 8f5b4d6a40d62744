"""Frozen image encoders, pluggable by name.

Every encoder is inference-only and deterministic: the same image bytes
always produce the same feature row.  The feature dimension is whatever the
encoder's pooled output happens to be; downstream consumers read it from
the container header and never assume a specific width.

``tiny-conv64`` is a small convolutional network with fixed seeded weights;
it needs nothing beyond numpy and runs anywhere.  ``inception_v3`` wraps
the torchvision model when torch and its pretrained weights are available
locally.
"""

from __future__ import annotations

import numpy as np
from PIL import Image


class EncoderUnavailableError(RuntimeError):
    """The requested encoder cannot run in this environment."""


class SeededConvEncoder:
    """Three stride-2 conv layers with frozen seeded weights, mean-pooled.

    64x64 RGB input; channels 3 -> 16 -> 32 -> 64; ReLU between layers;
    global average pooling gives a 64-dimensional feature.
    """

    name = "tiny-conv64"
    input_size = 64
    dim = 64

    _WEIGHT_SEED = 0x7C0FFEE

    def __init__(self):
        rng = np.random.default_rng(self._WEIGHT_SEED)
        shapes = [(16, 3, 3, 3), (32, 16, 3, 3), (64, 32, 3, 3)]
        self.kernels = []
        self.biases = []
        for out_ch, in_ch, kh, kw in shapes:
            fan_in = in_ch * kh * kw
            self.kernels.append(
                rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(out_ch, in_ch, kh, kw))
                .astype(np.float32)
            )
            self.biases.append(rng.normal(0.0, 0.01, size=out_ch).astype(np.float32))

    def preprocess(self, image: Image.Image) -> np.ndarray:
        resized = image.convert("RGB").resize(
            (self.input_size, self.input_size), Image.BILINEAR
        )
        x = np.asarray(resized, dtype=np.float32) / 255.0
        return ((x - 0.5) / 0.5).transpose(2, 0, 1)  # (3, H, W)

    @staticmethod
    def _conv_stride2(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> np.ndarray:
        # x: (N, C, H, W), kernel: (O, C, 3, 3) -> (N, O, H', W') with stride 2
        windows = np.lib.stride_tricks.sliding_window_view(x, (3, 3), axis=(2, 3))
        windows = windows[:, :, ::2, ::2]  # (N, C, H', W', 3, 3)
        return (
            np.einsum("nchwij,ocij->nohw", windows, kernel, optimize=True)
            + bias[None, :, None, None]
        )

    def forward(self, batch: np.ndarray) -> np.ndarray:
        x = batch.astype(np.float32)
        for kernel, bias in zip(self.kernels, self.biases):
            x = np.maximum(self._conv_stride2(x, kernel, bias), 0.0)
        return x.mean(axis=(2, 3)).astype(np.float32)  # (N, dim)


class InceptionV3Encoder:
    """Pretrained torchvision backbone, final-pooling-layer activations."""

    name = "inception_v3"
    input_size = 299
    dim = 2048

    def __init__(self):
        try:
            import torch
            from torchvision import models, transforms
        except ImportError as exc:
            raise EncoderUnavailableError(
                "inception_v3 needs torch and torchvision installed"
            ) from exc
        try:
            weights = models.Inception_V3_Weights.IMAGENET1K_V1
            net = models.inception_v3(weights=weights)
        except Exception as exc:  # weight download blocked or cache missing
            raise EncoderUnavailableError(
                f"inception_v3 pretrained weights unavailable: {exc}"
            ) from exc
        net.eval()
        self._torch = torch
        self._net = net
        self._resize = transforms.Compose([
            transforms.Resize(342),
            transforms.CenterCrop(299),
        ])
        self._mean = np.array([0.485, 0.456, 0.406], dtype=np.float32)
        self._std = np.array([0.229, 0.224, 0.225], dtype=np.float32)

    def preprocess(self, image: Image.Image) -> np.ndarray:
        resized = self._resize(image.convert("RGB"))
        x = np.asarray(resized, dtype=np.float32) / 255.0
        x = (x - self._mean) / self._std
        return x.transpose(2, 0, 1)

    def forward(self, batch: np.ndarray) -> np.ndarray:
        torch = self._torch
        net = self._net
        with torch.no_grad():
            x = torch.from_numpy(batch)
            # body of the network up to the final pooling layer
            x = net.Conv2d_1a_3x3(x)
            x = net.Conv2d_2a_3x3(x)
            x = net.Conv2d_2b_3x3(x)
            x = net.maxpool1(x)
            x = net.Conv2d_3b_1x1(x)
            x = net.Conv2d_4a_3x3(x)
            x = net.maxpool2(x)
            x = net.Mixed_5b(x)
            x = net.Mixed_5c(x)
            x = net.Mixed_5d(x)
            x = net.Mixed_6a(x)
            x = net.Mixed_6b(x)
            x = net.Mixed_6c(x)
            x = net.Mixed_6d(x)
            x = net.Mixed_6e(x)
            x = net.Mixed_7a(x)
            x = net.Mixed_7b(x)
            x = net.Mixed_7c(x)
            x = net.avgpool(x)
            return x.flatten(1).numpy().astype(np.float32)


_REGISTRY = {
    SeededConvEncoder.name: SeededConvEncoder,
    InceptionV3Encoder.name: InceptionV3Encoder,
}


def available_encoders() -> list[str]:
    return sorted(_REGISTRY)


def get_encoder(name: str):
    try:
        factory = _REGISTRY[name]
    except KeyError:
        raise EncoderUnavailableError(
            f"unknown encoder {name!r}; available: {', '.join(available_encoders())}"
        ) from None
    return factory()
