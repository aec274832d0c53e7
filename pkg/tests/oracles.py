"""Brute-force metric re-implementations shared by the metric tests."""

from collections import deque

import numpy as np


def flood_boxes(h, tau, conn=8):
    rows, cols = h.shape
    on = [[h[r][c] >= tau for c in range(cols)] for r in range(rows)]
    seen = [[False] * cols for _ in range(rows)]
    steps = [(-1, 0), (1, 0), (0, -1), (0, 1)]
    if conn == 8:
        steps += [(-1, -1), (-1, 1), (1, -1), (1, 1)]
    boxes = []
    for r in range(rows):
        for c in range(cols):
            if not on[r][c] or seen[r][c]:
                continue
            seen[r][c] = True
            q = deque([(r, c)])
            x0, y0, x1, y1 = c, r, c, r
            while q:
                y, x = q.popleft()
                x0, y0, x1, y1 = min(x0, x), min(y0, y), max(x1, x), max(y1, y)
                for dy, dx in steps:
                    ny, nx = y + dy, x + dx
                    if 0 <= ny < rows and 0 <= nx < cols and on[ny][nx] and not seen[ny][nx]:
                        seen[ny][nx] = True
                        q.append((ny, nx))
            boxes.append((x0, y0, x1 + 1, y1 + 1))
    return boxes


def naive_iou(a, b):
    inter = 0
    for y in range(min(a[1], b[1]), max(a[3], b[3])):
        for x in range(min(a[0], b[0]), max(a[2], b[2])):
            if a[0] <= x < a[2] and a[1] <= y < a[3] and b[0] <= x < b[2] and b[1] <= y < b[3]:
                inter += 1
    area = lambda q: (q[2] - q[0]) * (q[3] - q[1])
    return inter / (area(a) + area(b) - inter)


def naive_maxboxacc(maps, gts, delta, taus):
    best = 0.0
    for tau in taus:
        correct = 0
        for h, g in zip(maps, gts):
            ious = [naive_iou(p, q) for p in flood_boxes(h, tau) for q in g]
            if ious and max(ious) >= delta:
                correct += 1
        best = max(best, correct / len(maps))
    return best


def naive_pxap(maps, masks, taus):
    taus = sorted(taus)
    prec, rec = [], []
    npos = sum(int(m.sum()) for m in masks)
    for tau in taus:
        tp = npred = 0
        for h, m in zip(maps, masks):
            for v, lab in zip(h.ravel(), m.ravel()):
                if v >= tau:
                    npred += 1
                    tp += int(lab)
        prec.append(tp / npred if npred else 0.0)
        rec.append(tp / npos)
    total = 0.0
    for t in range(len(taus)):
        nxt = rec[t + 1] if t + 1 < len(taus) else 0.0
        total += prec[t] * (rec[t] - nxt)
    return total


def random_instance(rng, n, size):
    maps, gts, masks = [], [], []
    for _ in range(n):
        h = rng.random((size, size))
        # add a smooth blob so components are not all single pixels
        yy, xx = np.mgrid[:size, :size]
        cy, cx = rng.uniform(0, size, 2)
        h = 0.5 * h + 0.5 * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * (size / 5) ** 2))
        maps.append(h / h.max())
        boxes = []
        for _ in range(rng.integers(1, 3)):
            x0, y0 = rng.integers(0, size - 2, 2)
            x1, y1 = rng.integers(x0 + 1, size + 1), rng.integers(y0 + 1, size + 1)
            boxes.append((int(x0), int(y0), int(x1), int(y1)))
        gts.append(boxes)
        masks.append(rng.random((size, size)) < 0.3)
    return maps, gts, masks
