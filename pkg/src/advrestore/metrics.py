"""Image quality (PSNR, SSIM), attack success rate, and the report tables."""
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PSNR_SENTINEL = 99.0
ATTACK_ROWS = ("FIM", "FIM+AdvRestore", "DFANet", "DFANet+AdvRestore")
QUALITY_ROWS = ("Benign",) + ATTACK_ROWS


def _as_image(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3 and x.shape[0] == 1:
        x = x[0]
    return x


def psnr(a, b, max_val=1.0):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shape mismatch {list(a.shape)} vs {list(b.shape)}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_SENTINEL
    return min(10.0 * np.log10(max_val * max_val / mse), PSNR_SENTINEL)


def gaussian_window(size=11, sigma=1.5):
    x = np.arange(size) - size // 2
    g = np.exp(-(x**2) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img, g):
    rows = sliding_window_view(img, len(g), axis=0) @ g
    return sliding_window_view(rows, len(g), axis=1) @ g


def ssim(a, b, data_range=1.0, win=11, sigma=1.5):
    """Mean single-scale SSIM over all fully-contained Gaussian windows."""
    a, b = _as_image(a), _as_image(b)
    if a.shape != b.shape:
        raise ValueError(f"ssim: shape mismatch {list(a.shape)} vs {list(b.shape)}")
    if a.ndim != 2 or min(a.shape) < win:
        raise ValueError(f"ssim: image {list(a.shape)} smaller than the {win}x{win} window")
    g = gaussian_window(win, sigma)
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mx, my = _filter_valid(a, g), _filter_valid(b, g)
    vx = _filter_valid(a * a, g) - mx * mx
    vy = _filter_valid(b * b, g) - my * my
    cxy = _filter_valid(a * b, g) - mx * my
    s = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    return float(s.mean())


@dataclass
class QualityReport:
    anchor: str
    ssim: np.ndarray
    psnr: np.ndarray

    @property
    def mean_ssim(self):
        return float(np.mean(self.ssim))

    @property
    def mean_psnr(self):
        return float(np.mean(self.psnr))


def quality_report(images, references, anchor):
    """Per-image SSIM/PSNR of ``images`` against ``references`` (both (N, 1, H, W))."""
    images, references = np.asarray(images), np.asarray(references)
    if images.shape != references.shape:
        raise ValueError(f"quality_report: shape mismatch {list(images.shape)} vs {list(references.shape)}")
    return QualityReport(
        anchor=anchor,
        ssim=np.array([ssim(a, b) for a, b in zip(images, references)]),
        psnr=np.array([psnr(a, b) for a, b in zip(images, references)]),
    )


@dataclass
class AsrReport:
    victim: str
    successes: int
    total: int
    threshold: float
    per_pair: np.ndarray = field(repr=False, default=None)

    @property
    def asr(self):
        return 100.0 * self.successes / self.total


def attack_success_rate(distances, threshold, victim="victim"):
    """ASR (percent) from victim embedding distances: success iff distance < threshold."""
    d = np.asarray(distances, dtype=np.float64).reshape(-1)
    if d.size == 0:
        raise ValueError("attack_success_rate: empty result set")
    hits = d < threshold
    return AsrReport(victim=victim, successes=int(hits.sum()), total=int(d.size), threshold=float(threshold), per_pair=hits)


def merge_asr(a, b):
    """Combine reports over disjoint pair sets."""
    per_pair = None if a.per_pair is None or b.per_pair is None else np.concatenate([a.per_pair, b.per_pair])
    return AsrReport(a.victim, a.successes + b.successes, a.total + b.total, a.threshold, per_pair)


# ----------------------------------------------------------------------- report


def _table(header, rows):
    widths = [max(len(str(r[k])) for r in [header] + rows) for k in range(len(header))]
    fmt = " | ".join(f"{{:<{w}}}" if k == 0 else f"{{:>{w}}}" for k, w in enumerate(widths))
    line = "-+-".join("-" * w for w in widths)
    out = [fmt.format(*header), line]
    out += [fmt.format(*r) for r in rows]
    return "\n".join(out)


def emit_report(quality, asr_normal, asr_robust, whitebox=None, preamble=()):
    """Render the quality and ASR tables.

    ``quality`` maps each row of :data:`QUALITY_ROWS` to a pair of
    :class:`QualityReport` (vs x_hq, vs x_s). ``asr_normal``/``asr_robust`` map
    each row of :data:`ATTACK_ROWS` to ``{victim_name: asr_percent}``;
    ``whitebox`` maps rows to surrogate ASR. Returns ``(text, manifest)``.
    """
    lines = list(preamble)
    q_rows = []
    for label in QUALITY_ROWS:
        if label not in quality:
            continue
        vs_hq, vs_s = quality[label]
        q_rows.append(
            [label, f"{vs_hq.mean_ssim:.3f}", f"{vs_hq.mean_psnr:.1f}", f"{vs_s.mean_ssim:.3f}", f"{vs_s.mean_psnr:.1f}"]
        )
    lines += [
        "Visual quality (mean over attack pairs)",
        _table(["Image", "SSIM(x_hq)", "PSNR(x_hq)", "SSIM(x_s)*", "PSNR(x_s)*"], q_rows),
        "* measured against the attacker's source image x_s; the x_hq columns use its clean original.",
        "",
    ]
    manifest = {
        "quality": {
            label: {
                "ssim_vs_hq": quality[label][0].mean_ssim,
                "psnr_vs_hq": quality[label][0].mean_psnr,
                "ssim_vs_source": quality[label][1].mean_ssim,
                "psnr_vs_source": quality[label][1].mean_psnr,
            }
            for label in QUALITY_ROWS
            if label in quality
        }
    }
    for title, key, table in (
        ("Black-box ASR (%), normally trained victims", "asr_normal", asr_normal),
        ("Black-box ASR (%), adversarially fine-tuned victims", "asr_robust", asr_robust),
    ):
        victims = sorted({v for row in table.values() for v in row})
        rows = [[label] + [f"{table[label][v]:.1f}" for v in victims] for label in ATTACK_ROWS if label in table]
        lines += [title, _table(["Attacks"] + victims, rows), ""]
        manifest[key] = {label: dict(table[label]) for label in ATTACK_ROWS if label in table}
    if whitebox:
        rows = [[label, f"{whitebox[label]:.1f}"] for label in ATTACK_ROWS if label in whitebox]
        lines += ["White-box ASR (%) on the surrogate", _table(["Attacks", "surrogate"], rows), ""]
        manifest["asr_whitebox"] = {label: whitebox[label] for label in ATTACK_ROWS if label in whitebox}
    return "\n".join(lines).rstrip("\n") + "\n", manifest
