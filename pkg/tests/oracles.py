"""Independent reference computations shared by the unit and acceptance tests."""

import numpy as np
import torch

from ldct import denoiser as D
from ldct import tomo
from ldct import training as T


def disk_image(n, radius, oversample=4):
    """Centred disk with area-averaged edge pixels."""
    m = n * oversample
    c = (np.arange(m) - (m - 1) / 2) / oversample
    y, x = np.meshgrid(c, c, indexing="ij")
    inside = (x ** 2 + y ** 2 <= radius ** 2).astype(float)
    return inside.reshape(n, oversample, n, oversample).mean(axis=(1, 3))


def adjoint_defect(geom, x, u):
    rx = tomo.radon_forward(x, geom).values
    bu = tomo.backproject(tomo.Sinogram(u, geom))
    return abs(np.vdot(rx, u) - np.vdot(x, bu)) / (np.linalg.norm(x) * np.linalg.norm(bu))


def recon_error(n, num_angles, kind="ramlak"):
    geom = tomo.ScanGeometry.default(n, num_angles)
    disk = disk_image(n, 0.25 * n)
    rec = tomo.fbp(tomo.radon_forward(disk, geom), kind)
    x, y = geom.pixel_coords()
    inside = x ** 2 + y ** 2 <= (n / 2) ** 2
    return np.linalg.norm((rec - disk)[inside]) / np.linalg.norm(disk[inside])


def brute_force_ssim(x, y, data_range, size=11, sigma=1.5, k1=0.01, k2=0.03):
    """Direct per-window SSIM with explicit weighted moments."""
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-ax ** 2 / (2 * sigma ** 2))
    w = np.outer(g, g)
    w /= w.sum()
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    vals = []
    for i in range(x.shape[0] - size + 1):
        for j in range(x.shape[1] - size + 1):
            px = x[i:i + size, j:j + size]
            py = y[i:i + size, j:j + size]
            mx, my = (w * px).sum(), (w * py).sum()
            vx = (w * (px - mx) ** 2).sum()
            vy = (w * (py - my) ** 2).sum()
            cxy = (w * (px - mx) * (py - my)).sum()
            vals.append((2 * mx * my + c1) * (2 * cxy + c2) / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2)))
    return float(np.mean(vals))


def closed_form_count(num_scales, base, blocks):
    """Hand count of conv weights: head, tail, resblocks, down/up 2x2 convs."""
    ch = [base * 2 ** i for i in range(num_scales)]
    total = 2 * ch[0] * 9 + ch[0] * 9
    for i in range(num_scales - 1):
        total += 2 * blocks * 2 * 9 * ch[i] ** 2  # encoder + decoder blocks
        total += 2 * 4 * ch[i] * ch[i + 1]  # strided conv + transposed conv
    total += blocks * 2 * 9 * ch[-1] ** 2
    return total


def kink_aware_gradcheck(model, x, y, cfg, h=1e-4):
    """Central differences for every scalar weight, skipping weights whose
    perturbation flips a ReLU sign or the sign of (pred - gt)."""
    value, grads = T.loss_gradients(model, x, y, cfg)
    patterns = []
    hooks = [m.register_forward_hook(lambda mod, i, o: patterns.append(i[0] > 0))
             for m in model.modules() if isinstance(m, torch.nn.ReLU)]

    def evaluate():
        patterns.clear()
        with torch.no_grad():
            pred = T.predict(model, x)
            v = float(T.composite_loss(pred, y, model, cfg.alpha, cfg.lam, cfg.ssim_range))
        return v, [p.clone() for p in patterns] + [pred > y]

    worst, checked, skipped, kinds = 0.0, 0, 0, set()
    kind_of = {r["name"]: r["kind"] for r in D.layer_table(model)}
    try:
        for name, p in model.named_parameters():
            flat = p.data.view(-1)
            g = grads[name].view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up, pat_up = evaluate()
                flat[i] = orig - h
                down, pat_down = evaluate()
                flat[i] = orig
                if any(not torch.equal(a, b) for a, b in zip(pat_up, pat_down)):
                    skipped += 1
                    continue
                fd = (up - down) / (2 * h)
                an = g[i].item()
                worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-8))
                checked += 1
                kinds.add(kind_of[name])
    finally:
        for hk in hooks:
            hk.remove()
    return worst, checked, skipped, kinds


def seam_samples(out, grid=16, margin=8):
    """Per-line max |adjacent difference| on grid lines and on mid-cell lines."""
    boundary, interior = [], []
    for o in (out, out.T):
        d = np.abs(np.diff(o, axis=1))[margin:-margin]
        last = o.shape[1] - margin
        boundary += [d[:, j - 1].max() for j in range(grid, last, grid)]
        interior += [d[:, j - 1].max() for j in range(grid // 2, last, grid) if j >= margin]
    return boundary, interior
