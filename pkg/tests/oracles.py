"""Independent scalar-loop oracles and a finite-difference gradient checker.

Everything here is deliberately written with plain python loops over numpy
arrays so the expected values come from a different code path than the
vectorized torch implementations under test.
"""

from __future__ import annotations

import numpy as np
import torch


def sample_bilinear_scalar(data: np.ndarray, y: float, x: float) -> np.ndarray:
    """Border-clamped bilinear sample of [K, H, W] data at one real coordinate."""
    k, h, w = data.shape
    y = min(max(float(y), 0.0), float(h - 1))
    x = min(max(float(x), 0.0), float(w - 1))
    y0, x0 = int(np.floor(y)), int(np.floor(x))
    y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
    wy, wx = y - y0, x - x0
    out = np.empty(k, dtype=np.float64)
    for c in range(k):
        top = data[c, y0, x0] * (1 - wx) + data[c, y0, x1] * wx
        bot = data[c, y1, x0] * (1 - wx) + data[c, y1, x1] * wx
        out[c] = top * (1 - wy) + bot * wy
    return out


def resize_oracle(data: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    """Align-corners bilinear resize, one output pixel at a time."""
    k, h, w = data.shape
    out = np.empty((k, target_h, target_w), dtype=np.float64)
    for i in range(target_h):
        y = (h - 1) / 2.0 if target_h == 1 else i * (h - 1) / (target_h - 1)
        for j in range(target_w):
            x = (w - 1) / 2.0 if target_w == 1 else j * (w - 1) / (target_w - 1)
            out[:, i, j] = sample_bilinear_scalar(data, y, x)
    return out


def warp_oracle(data: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """Backward warp: out(y, x) = sample(data, y - dy, x - dx)."""
    k, h, w = data.shape
    out = np.empty((k, h, w), dtype=np.float64)
    for i in range(h):
        for j in range(w):
            out[:, i, j] = sample_bilinear_scalar(data, i - flow[1, i, j], j - flow[0, i, j])
    return out


def nonsalient_mask_oracle(cam: np.ndarray, alpha: float) -> np.ndarray:
    """Full-sort realization of the quantile threshold mask."""
    flat = np.sort(cam.reshape(-1))[::-1]
    if alpha == 0:
        tau = flat[0]
    else:
        j = max(1, int(np.floor(flat.size * alpha)))
        tau = flat[j - 1]
    return ((cam > 0) & (cam <= tau)).astype(np.uint8)


def miou_oracle(gt: np.ndarray, pred: np.ndarray, num_classes: int, ignore: int = 255):
    """Per-pixel counting mIoU: sets built by explicit iteration."""
    ious = []
    per_class = {}
    for n in range(num_classes):
        inter = union = gt_count = 0
        for a, b in zip(gt.reshape(-1), pred.reshape(-1)):
            if a == ignore:
                continue
            if a == n:
                gt_count += 1
            if a == n and b == n:
                inter += 1
            if a == n or b == n:
                union += 1
        if gt_count == 0:
            per_class[n] = None
            continue
        iou = inter / union if union else 0.0
        per_class[n] = iou
        ious.append(iou)
    return (sum(ious) / len(ious) if ious else float("nan")), per_class


def finite_difference_check(fn, params, rtol=1e-4, h=1e-6, max_coords=24, seed=0,
                            skip_kinks=False):
    """Compare autograd gradients of scalar fn(*params) against central differences.

    params must be contiguous float64 leaf tensors with requires_grad=True.
    Checks up to max_coords randomly chosen coordinates per tensor and asserts
    the worst relative error is within rtol. Returns the worst error seen.

    skip_kinks=True drops coordinates where the two one-sided slopes disagree,
    i.e. where a relu/threshold lies within +-h and the central difference is
    not an estimate of any derivative; most coordinates must survive.
    """
    loss = fn(*params)
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    f0 = float(loss.detach())
    rng = np.random.default_rng(seed)
    worst = 0.0
    probed = 0
    skipped = 0
    for tensor, grad in zip(params, grads):
        grad = torch.zeros_like(tensor) if grad is None else grad
        flat = tensor.detach().view(-1)
        gflat = grad.reshape(-1)
        n = flat.numel()
        coords = np.arange(n) if n <= max_coords else rng.choice(n, size=max_coords, replace=False)
        for i in coords:
            i = int(i)
            orig = flat[i].item()
            step = h * max(1.0, abs(orig))
            with torch.no_grad():
                flat[i] = orig + step
                up = float(fn(*params))
                flat[i] = orig - step
                down = float(fn(*params))
                flat[i] = orig
            probed += 1
            fd = (up - down) / (2.0 * step)
            if skip_kinks:
                fd_plus = (up - f0) / step
                fd_minus = (f0 - down) / step
                sided = abs(fd_plus - fd_minus) / max(abs(fd_plus), abs(fd_minus), 1e-6)
                if sided > 1e-3:
                    skipped += 1
                    continue
            an = gflat[i].item()
            rel = abs(fd - an) / max(abs(fd), abs(an), 1e-6)
            worst = max(worst, rel)
    if skip_kinks:
        assert skipped <= probed // 2, f"too many kinked coordinates: {skipped}/{probed}"
    assert worst <= rtol, f"gradient mismatch: worst relative error {worst:.3e} > {rtol:g}"
    return worst


def leaf(array, requires_grad=True):
    """float64 contiguous leaf tensor from any array-like."""
    t = torch.as_tensor(np.ascontiguousarray(array), dtype=torch.float64)
    return t.clone().requires_grad_(requires_grad)
