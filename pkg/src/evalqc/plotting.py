"""Evaluator-effects plot, written as standalone SVG.

One point mark per evaluator effect, a horizontal line at the truncated
mean of the effects, and a ring around each detected evaluator colored
by the smallest alpha at which it was first rejected.  A delimited
backing table always accompanies the figure so any external plotter can
redraw it; no plotting library is involved.
"""

from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

from .detection import DetectionConfig, truncated_mean
from .errors import InputError

WIDTH, HEIGHT = 860, 460
MARGIN_LEFT, MARGIN_RIGHT, MARGIN_TOP, MARGIN_BOTTOM = 64, 28, 36, 56

PALETTE = ("#d62728", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2")


def _detected_alphas(fit_report: dict, detection_reports) -> dict[str, float]:
    """Smallest alpha at which each evaluator was rejected, across one or
    more detection runs on the same fit."""
    labels = list(fit_report["evaluators"])
    first_alpha: dict[str, float] = {}
    for report in sorted(detection_reports, key=lambda r: r["config"]["alpha"]):
        if list(report["evaluators"]) != labels:
            raise InputError(
                "detection report evaluators do not match the fit report"
            )
        alpha = float(report["config"]["alpha"])
        for label in report["detected"]:
            first_alpha.setdefault(label, alpha)
    return first_alpha


def plot_effects(fit_report: dict, detection_reports) -> tuple[str, list[list]]:
    """Render the figure; returns (svg text, backing table rows).

    Backing rows follow the fit report's evaluator order with columns
    evaluator, beta_hat, truncated_mean, detected_alpha (blank when the
    evaluator was never rejected).
    """
    detection_reports = list(detection_reports)
    if not detection_reports:
        raise InputError("at least one detection report is required")
    labels = list(fit_report["evaluators"])
    beta = np.asarray(fit_report["beta_hat"], dtype=float)
    if beta.size != len(labels):
        raise InputError("fit report beta_hat length does not match evaluators")

    config = DetectionConfig.from_dict(detection_reports[0]["config"])
    center = truncated_mean(beta, config.trim)
    first_alpha = _detected_alphas(fit_report, detection_reports)
    alpha_levels = sorted(set(first_alpha.values()))
    color_of = {
        alpha: PALETTE[i % len(PALETTE)] for i, alpha in enumerate(alpha_levels)
    }

    low = min(beta.min(), center)
    high = max(beta.max(), center)
    pad = 0.05 * (high - low) if high > low else 1.0
    low, high = low - pad, high + pad

    plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT
    plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM

    def x_of(i: int) -> float:
        return MARGIN_LEFT + (i + 0.5) * plot_w / len(labels)

    def y_of(value: float) -> float:
        return MARGIN_TOP + (high - value) / (high - low) * plot_h

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" '
        f'height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<line x1="{MARGIN_LEFT}" y1="{MARGIN_TOP}" x2="{MARGIN_LEFT}" '
        f'y2="{MARGIN_TOP + plot_h}" stroke="black"/>',
        f'<line x1="{MARGIN_LEFT}" y1="{MARGIN_TOP + plot_h}" '
        f'x2="{MARGIN_LEFT + plot_w}" y2="{MARGIN_TOP + plot_h}" stroke="black"/>',
    ]

    for value in np.linspace(low, high, 5):
        y = y_of(value)
        parts.append(
            f'<line x1="{MARGIN_LEFT - 4}" y1="{y:.2f}" x2="{MARGIN_LEFT}" '
            f'y2="{y:.2f}" stroke="black"/>'
        )
        parts.append(
            f'<text x="{MARGIN_LEFT - 8}" y="{y + 4:.2f}" font-size="11" '
            f'text-anchor="end">{value:.4g}</text>'
        )

    label_step = max(1, -(-len(labels) // 25))
    for i, label in enumerate(labels):
        if i % label_step:
            continue
        parts.append(
            f'<text x="{x_of(i):.2f}" y="{MARGIN_TOP + plot_h + 16}" '
            f'font-size="10" text-anchor="middle">{escape(label)}</text>'
        )
    parts.append(
        f'<text x="{MARGIN_LEFT + plot_w / 2:.2f}" y="{HEIGHT - 16}" '
        f'font-size="12" text-anchor="middle">evaluator</text>'
    )
    parts.append(
        f'<text x="16" y="{MARGIN_TOP + plot_h / 2:.2f}" font-size="12" '
        f'text-anchor="middle" transform="rotate(-90 16 '
        f'{MARGIN_TOP + plot_h / 2:.2f})">estimated effect</text>'
    )

    y_center = y_of(center)
    parts.append(
        f'<line class="trunc-mean" x1="{MARGIN_LEFT}" y1="{y_center:.2f}" '
        f'x2="{MARGIN_LEFT + plot_w}" y2="{y_center:.2f}" stroke="#1f77b4" '
        f'stroke-dasharray="6 3"/>'
    )

    for i, label in enumerate(labels):
        parts.append(
            f'<circle class="effect" cx="{x_of(i):.2f}" cy="{y_of(beta[i]):.2f}" '
            f'r="3.5" fill="black"/>'
        )
    for i, label in enumerate(labels):
        if label not in first_alpha:
            continue
        color = color_of[first_alpha[label]]
        parts.append(
            f'<circle class="detected" cx="{x_of(i):.2f}" '
            f'cy="{y_of(beta[i]):.2f}" r="7" fill="none" stroke="{color}" '
            f'stroke-width="2"/>'
        )

    legend_y = MARGIN_TOP + 6
    for alpha in alpha_levels:
        parts.append(
            f'<circle cx="{MARGIN_LEFT + plot_w - 130}" cy="{legend_y}" r="5" '
            f'fill="none" stroke="{color_of[alpha]}" stroke-width="2"/>'
        )
        parts.append(
            f'<text x="{MARGIN_LEFT + plot_w - 120}" y="{legend_y + 4}" '
            f'font-size="11">detected at alpha={alpha:g}</text>'
        )
        legend_y += 18
    parts.append("</svg>")

    rows = [
        [
            label,
            repr(float(beta[i])),
            repr(float(center)),
            "" if label not in first_alpha else f"{first_alpha[label]:g}",
        ]
        for i, label in enumerate(labels)
    ]
    return "\n".join(parts) + "\n", rows


BACKING_TABLE_HEADER = ["evaluator", "beta_hat", "truncated_mean", "detected_alpha"]
