"""Shared test helpers: a slow soft-martingale reference and acceptance reporting."""
from drm import soft
from drm import tensor as tg


def reference_martingale(features, labels, cfg):
    """Prefix-by-prefix evaluation with the list-based ops (O(T^3))."""
    feats = list(features)
    p = [tg.constant(0.5)]
    for t in range(2, len(feats) + 1):
        scores = soft.soft_conformity_scores(feats, labels, cfg, t)
        keep = [i for i in range(t) if scores[i] is not None or i == t - 1]
        if scores[t - 1] is None:
            # a point without a same-label neighbour: its fused score is 0 and
            # compares only with equally undefined scores (weight 0.5)
            same = [i for i in range(t) if labels is None or labels[i] == labels[t - 1]]
            p.append(tg.constant(0.5))
            assert len(same) == 1
            continue
        sc = [scores[i] for i in keep]
        lab = None if labels is None else [labels[i] for i in keep]
        p.append(soft.soft_pvalue(sc, lab, cfg))
    return soft.martingale_node(tg.stack(p))


# (criterion number, part) -> "[PASS]/[FAIL] ..." line, repeated at the end of the run
ACCEPTANCE_LINES: dict[tuple[int, str], str] = {}


def report(number: int, title: str, passed: bool, detail: str, part: str = "") -> None:
    label = f"{number:2d}{part}"
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {label}: {title}: {detail}"
    ACCEPTANCE_LINES[(number, part)] = line
    print(line)
