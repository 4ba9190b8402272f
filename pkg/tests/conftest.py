import math
import random

from panobox.model import GeoPoint


def convex_hull(points):
    """Andrew monotone chain; returns hull vertices in counter-clockwise order."""
    pts = sorted(set((p[0], p[1]) for p in points))
    if len(pts) < 3:
        return [GeoPoint(*p) for p in pts]

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper = []
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return [GeoPoint(*p) for p in lower[:-1] + upper[:-1]]


def random_convex_ring(rng: random.Random, n: int, center, radius: float):
    """Convex polygon with <= n vertices scattered around center."""
    cloud = [
        GeoPoint(
            center[0] + rng.uniform(-radius, radius),
            center[1] + rng.uniform(-radius, radius),
        )
        for _ in range(max(3, n))
    ]
    return convex_hull(cloud)
