"""Static SVG overlays: observed tracks, predicted modes, ground truth."""

from __future__ import annotations

from fimp.model import ScenePrediction
from fimp.scene import T_HISTORY, SceneFrame


def _poly(points, color, width, opacity=1.0, dash=None) -> str:
    pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in points)
    extra = f' stroke-dasharray="{dash}"' if dash else ""
    return (f'<polyline points="{pts}" fill="none" stroke="{color}" '
            f'stroke-width="{width}" stroke-opacity="{opacity:.3f}"{extra}/>')


def scene_svg(scene: SceneFrame, pred: ScenePrediction | None = None,
              size: int = 720) -> str:
    """Self-contained SVG for one scenario (y axis flipped to map north-up)."""
    xs, ys = [], []
    for a in scene.agents:
        pts = a.xy[a.mask]
        if len(pts):
            xs.extend(pts[:, 0])
            ys.extend(pts[:, 1])
    for l in scene.lanes:
        xs.extend(l.points[:, 0])
        ys.extend(l.points[:, 1])
    if not xs:
        xs = ys = [0.0]
    x0, x1 = min(xs) - 10, max(xs) + 10
    y0, y1 = min(ys) - 10, max(ys) + 10
    span = max(x1 - x0, y1 - y0)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
        f'viewBox="{x0:.1f} {-y1:.1f} {span:.1f} {span:.1f}">',
        f'<rect x="{x0:.1f}" y="{-y1:.1f}" width="{span:.1f}" height="{span:.1f}" fill="white"/>',
    ]
    flip = lambda pts: [(p[0], -p[1]) for p in pts]
    for l in scene.lanes:
        parts.append(_poly(flip(l.points), "#d8d8d8", 0.8))
    for a in scene.agents:
        obs = a.xy[:T_HISTORY][a.mask[:T_HISTORY]]
        if len(obs) > 1:
            parts.append(_poly(flip(obs), "#555555", 0.6))
        fut = a.xy[T_HISTORY:][a.mask[T_HISTORY:]]
        if len(fut) > 1:
            parts.append(_poly(flip(fut), "#d62728", 0.6))
    if pred is not None:
        conf = pred.pred.confidence
        for s in range(len(pred.agent_order)):
            for m in range(conf.shape[1]):
                opacity = 0.2 + 0.8 * float(conf[s, m])
                parts.append(_poly(flip(pred.locations_global[s, m]),
                                   "#1f77b4", 0.6, opacity, dash="1.5,1"))
    parts.append("</svg>")
    return "\n".join(parts)


def write_scene_svg(path, scene: SceneFrame, pred: ScenePrediction | None = None) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(scene_svg(scene, pred))
