###############################################################################
# Copyright 2025 The mpgan Authors
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
# http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.
#
###############################################################################
""" Evaluation helpers: PSNR, slice rendering and loss plots """
import io
import math
import pathlib
from typing import Mapping

import matplotlib
import numpy as np
from PIL import Image, PngImagePlugin

from .exc import ValidationError
from .training import moving_average, read_log
from .types import Axis
from .util import atomic_write_bytes

matplotlib.use('Agg')
import matplotlib.pyplot as plt  # noqa: E402  pylint: disable=wrong-import-position

IDENTICAL = 'identical'


def psnr(a: np.ndarray, b: np.ndarray, peak: float | None = None) -> float:
    """`10 log10(peak^2 / MSE)`; `math.inf` when the volumes are identical

    `peak` defaults to the larger maximum of the two volumes, keeping the metric symmetric.

    Raises:
        ValidationError: on a dims mismatch or a non-positive peak
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError(f'Cannot compare volumes of dims {a.shape} and {b.shape}')
    if peak is None:
        peak = float(max(a.max(initial=0.0), b.max(initial=0.0)))
    if not peak > 0:
        raise ValidationError(f'peak must be positive, got {peak}')
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak ** 2 / mse)


def format_psnr(value: float) -> str:
    """ Printable PSNR with the sentinel for identical inputs """
    return IDENTICAL if math.isinf(value) else f'{value:.4f} dB'


def slice_image(volume: np.ndarray, axis: Axis | int, index: int) -> tuple[Image.Image, float]:
    """8-bit grayscale image of one slice, densities mapped linearly from [0, max]

    The first in-plane axis runs left to right and the second bottom to top.

    Returns:
        the image and the density mapped to white

    Raises:
        ValidationError: if `index` lies outside the volume
    """
    axis = Axis(axis)
    vol = np.asarray(volume)
    if vol.ndim != 3:
        raise ValidationError(f'Expected a scalar volume, got shape {vol.shape}')
    if not 0 <= index < vol.shape[axis]:
        raise ValidationError(f'Slice index {index} outside [0, {vol.shape[axis]})')
    plane = np.take(vol, index, axis=axis).astype(np.float64)
    top = float(plane.max())
    if top > 0:
        pixels = np.rint(np.clip(plane, 0.0, top) / top * 255.0).astype(np.uint8)
    else:
        pixels = np.zeros(plane.shape, dtype=np.uint8)
    return Image.fromarray(np.ascontiguousarray(np.flipud(pixels.T))), top


def render_slice(volume: np.ndarray, axis: Axis | int, index: int,
                 out_png: pathlib.Path) -> pathlib.Path:
    """ Write `slice_image` as a PNG carrying a `density_max` text chunk """
    image, top = slice_image(volume, axis, index)
    info = PngImagePlugin.PngInfo()
    info.add_text('density_max', repr(top))
    buf = io.BytesIO()
    image.save(buf, format='PNG', pnginfo=info)
    return atomic_write_bytes(pathlib.Path(out_png), buf.getvalue())


def plot_losses(logs: Mapping[str, pathlib.Path], out_png: pathlib.Path, term: str = 'g_l1',
                window: int = 10) -> pathlib.Path:
    """Plot one CSV loss column of several training logs against the iteration

    Args:
        logs: curve label to training log
        term: column to plot
        window: trailing moving-average window

    Raises:
        ValidationError: if a log lacks `term`
    """
    fig, ax = plt.subplots(figsize=(7, 4))
    try:
        for label, path in logs.items():
            columns = read_log(path)
            if term not in columns:
                raise ValidationError(f'{path} has no column {term!r}')
            ax.plot(columns['iteration'], moving_average(columns[term], window), label=label)
        ax.set_xlabel('iteration')
        ax.set_ylabel(term)
        ax.set_yscale('log' if term == 'g_l1' else 'linear')
        ax.legend()
        fig.tight_layout()
        buf = io.BytesIO()
        fig.savefig(buf, format='png', dpi=120)
    finally:
        plt.close(fig)
    return atomic_write_bytes(pathlib.Path(out_png), buf.getvalue())
