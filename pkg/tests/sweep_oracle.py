"""Exhaustive margin-line oracle.

A threshold only changes the confusion counts when it crosses a distance, so
scanning 0, every distance and the float just above every distance visits
every achievable partition of the points.
"""

import math


def brute_force_best_accuracy(distances, labels):
    cands = [0.0] + list(distances) + [math.nextafter(d, math.inf) for d in distances]
    best = -1.0
    for t in cands:
        correct = sum((d < t) == (y == 1) for d, y in zip(distances, labels))
        best = max(best, correct / len(distances))
    return best


def accuracy_at(distances, labels, t):
    return sum((d < t) == (y == 1) for d, y in zip(distances, labels)) / len(distances)
