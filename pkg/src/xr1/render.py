"""Vectorized rasterizer for the 2D manipulation world.

Each camera view is an affine map of the unit workspace; rendering samples
primitives in world coordinates through precomputed per-pixel coordinate
grids, so the oblique view is a genuinely different projection of the same
scene rather than a recolor.
"""

from __future__ import annotations

import math

import numpy as np

PALETTE = {
    "red": (0.85, 0.18, 0.15),
    "green": (0.16, 0.65, 0.23),
    "blue": (0.18, 0.32, 0.80),
    "yellow": (0.88, 0.78, 0.12),
}

GOAL_COLOR = (0.55, 0.55, 0.62)
WAYPOINT_COLOR = (0.65, 0.60, 0.70)


def _affine_inverse(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    inv = np.linalg.inv(a)
    return inv, -inv @ b


def view_grids(image_size: int, views: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per-view (Xw, Yw) world-coordinate grids of shape (H, W)."""
    px = (np.arange(image_size) + 0.5) / image_size
    vx, vy = np.meshgrid(px, 1.0 - px[:, None].squeeze(1), indexing="xy")
    grids = []
    for k in range(views):
        if k == 0:
            a = np.eye(2)
            b = np.zeros(2)
        else:
            # oblique: rotate and foreshorten about the workspace center
            ang = math.radians(18.0 * k)
            rot = np.array([[math.cos(ang), -math.sin(ang)],
                            [math.sin(ang), math.cos(ang)]])
            a = rot @ np.diag([1.0, 0.80])
            b = np.array([0.5, 0.5]) - a @ np.array([0.5, 0.47])
        inv_a, inv_b = _affine_inverse(a, b)
        world = np.stack([vx, vy], axis=-1) @ inv_a.T + inv_b
        grids.append((world[..., 0].astype(np.float32), world[..., 1].astype(np.float32)))
    return grids


class Canvas:
    """One frame being drawn over a fixed background."""

    def __init__(self, grid: tuple[np.ndarray, np.ndarray], background: np.ndarray):
        self.xw, self.yw = grid
        self.img = background.copy()

    def fill_circle(self, center, radius: float, color) -> None:
        mask = (self.xw - center[0]) ** 2 + (self.yw - center[1]) ** 2 <= radius ** 2
        self.img[mask] = color

    def fill_ring(self, center, r_in: float, r_out: float, color) -> None:
        d2 = (self.xw - center[0]) ** 2 + (self.yw - center[1]) ** 2
        mask = (d2 >= r_in ** 2) & (d2 <= r_out ** 2)
        self.img[mask] = color

    def fill_rect(self, x0: float, x1: float, y0: float, y1: float, color) -> None:
        mask = (self.xw >= x0) & (self.xw <= x1) & (self.yw >= y0) & (self.yw <= y1)
        self.img[mask] = color

    def fill_capsule(self, a, b, width: float, color) -> None:
        ax, ay = a
        bx, by = b
        dx, dy = bx - ax, by - ay
        len2 = dx * dx + dy * dy
        px = self.xw - ax
        py = self.yw - ay
        if len2 < 1e-12:
            t = np.zeros_like(px)
        else:
            t = np.clip((px * dx + py * dy) / len2, 0.0, 1.0)
        d2 = (px - t * dx) ** 2 + (py - t * dy) ** 2
        self.img[d2 <= width ** 2] = color


def make_background(image_size: int, views: int, tint) -> list[np.ndarray]:
    """Per-view background: tinted field with a darker out-of-workspace area."""
    grids = view_grids(image_size, views)
    outs = []
    for xw, yw in grids:
        img = np.empty((image_size, image_size, 3), dtype=np.float32)
        img[:] = tint
        outside = (xw < 0.0) | (xw > 1.0) | (yw < 0.0) | (yw > 1.0)
        img[outside] = np.asarray(tint, dtype=np.float32) * 0.55
        outs.append(img)
    return outs


def draw_goal(canvas: Canvas, goal: dict) -> None:
    if goal["kind"] == "circle":
        canvas.fill_ring(goal["center"], goal["radius"] * 0.72, goal["radius"], GOAL_COLOR)
    else:
        x0, x1, y0, y1 = goal["bounds"]
        canvas.fill_rect(x0, x1, y0, y1, tuple(0.5 + 0.4 * c for c in GOAL_COLOR))
        canvas.fill_rect(x0 + 0.015, x1 - 0.015, y0 + 0.015, y1 - 0.015, GOAL_COLOR)


def draw_marker(canvas: Canvas, center, radius: float, color_name: str) -> None:
    canvas.fill_ring(center, radius * 0.55, radius, PALETTE[color_name])


def draw_object(canvas: Canvas, center, radius: float, color_name: str) -> None:
    canvas.fill_circle(center, radius, PALETTE[color_name])
    canvas.fill_circle(center, radius * 0.45,
                       tuple(min(1.0, c * 1.35) for c in PALETTE[color_name]))


def draw_arm(canvas: Canvas, joints, color, grip_closed: bool) -> None:
    for a, b in zip(joints[:-1], joints[1:]):
        canvas.fill_capsule(a, b, 0.022, color)
    for j in joints[:-1]:
        canvas.fill_circle(j, 0.028, tuple(c * 0.6 for c in color))
    ee = joints[-1]
    canvas.fill_circle(ee, 0.030, color)
    canvas.fill_circle(ee, 0.018, (0.15, 0.75, 0.35) if grip_closed else (0.95, 0.95, 0.95))


def draw_gantry(canvas: Canvas, pos, color, grip_closed: bool) -> None:
    canvas.fill_rect(0.0, 1.0, 0.955, 0.98, tuple(c * 0.8 for c in color))
    canvas.fill_capsule((pos[0], 0.96), (pos[0], pos[1]), 0.016, color)
    canvas.fill_circle(pos, 0.030, color)
    canvas.fill_circle(pos, 0.018, (0.15, 0.75, 0.35) if grip_closed else (0.95, 0.95, 0.95))


def draw_cursor(canvas: Canvas, pos, grip_closed: bool) -> None:
    canvas.fill_ring(pos, 0.020, 0.034, (0.25, 0.22, 0.20))
    canvas.fill_circle(pos, 0.014, (0.1, 0.1, 0.1) if grip_closed else (0.45, 0.40, 0.38))
