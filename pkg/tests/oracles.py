"""Independent brute-force reference implementations used by the metric tests."""
import math


def cat_bruteforce(real_rows, syn_rows, nonnumeric_cols):
    ratios = []
    for j in nonnumeric_cols:
        seen_r, seen_s = set(), set()
        for row in real_rows:
            seen_r.add(row[j])
        for row in syn_rows:
            seen_s.add(row[j])
        if seen_r:
            ratios.append(min(1.0, len(seen_s) / len(seen_r)))
    return sum(ratios) / len(ratios)


def tau_b_bruteforce(x, y):
    n = len(x)
    conc = disc = tx = ty = 0
    for i in range(n):
        for j in range(i + 1, n):
            dx = x[i] - x[j]
            dy = y[i] - y[j]
            if dx == 0 and dy == 0:
                continue
            if dx == 0:
                tx += 1
            elif dy == 0:
                ty += 1
            elif dx * dy > 0:
                conc += 1
            else:
                disc += 1
    denom = math.sqrt((conc + disc + tx) * (conc + disc + ty))
    return (conc - disc) / denom if denom else 0.0


def risk_bruteforce(real_classes, syn_classes):
    total = 0.0
    for s in syn_classes:
        f = sum(1 for r in real_classes if r == s)
        if f:
            total += 1.0 / f
    return total / len(syn_classes)


def heatmap_bruteforce(greedy, states, n1, n2):
    grid = [[0] * n2 for _ in range(n1)]
    for s in states:
        a = greedy[s]
        grid[a // n2][a % n2] += 1
    return grid, len(states)
