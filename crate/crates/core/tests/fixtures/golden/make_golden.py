"""Writes the 3-image evaluation fixture and its expected report.

Metrics are computed with plain nested loops over pixels and thresholds.
Run from this directory: python3 make_golden.py
"""
import os
import random

H, W = 5, 7
BETA_SQ = 0.3


def write_pgm(path, rows):
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (W, H))
        f.write(bytes(v for row in rows for v in row))


def images():
    rng = random.Random(20240611)
    out = {}
    # a blob of glass with a noisy prediction
    gt = [[255 if 1 <= y <= 3 and 2 <= x <= 5 else 0 for x in range(W)] for y in range(H)]
    pred = [[min(255, max(0, (200 if g else 40) + rng.randint(-60, 60))) for g in row] for row in gt]
    out["a_blob"] = (pred, gt)
    # no glass at all: BER undefined
    gt = [[0] * W for _ in range(H)]
    pred = [[rng.choice([0, 10, 127, 128, 130, 250]) for _ in range(W)] for _ in range(H)]
    out["b_empty"] = (pred, gt)
    # diagonal split, prediction shifted by one column, with exact ties at 0.5 boundary bytes
    gt = [[255 if x > y else 0 for x in range(W)] for y in range(H)]
    pred = [[rng.randint(0, 255) if x > y + 1 else rng.randint(0, 128) for x in range(W)] for y in range(H)]
    out["c_diagonal"] = (pred, gt)
    return out


def counts(p, g, t):
    tp = tn = fp = fn = 0
    for pv, gv in zip(p, g):
        pos = pv > t
        if pos and gv:
            tp += 1
        elif not pos and not gv:
            tn += 1
        elif pos:
            fp += 1
        else:
            fn += 1
    return tp, tn, fp, fn


def per_image(p, g):
    tp, tn, fp, fn = counts(p, g, 0.5)
    union = tp + fp + fn
    iou = 1.0 if union == 0 else tp / union
    pa = (tp + tn) / (tp + tn + fp + fn)
    s = 0.0
    for pv, gv in zip(p, g):
        s += abs(pv - float(gv))
    mae = s / len(p)
    npos, nneg = tp + fn, tn + fp
    ber = None
    if npos and nneg:
        ber = (1.0 - 0.5 * (tp / npos + tn / nneg)) * 100.0
    return iou, pa, mae, ber


def f_beta(p, r):
    den = BETA_SQ * p + r
    return 0.0 if den == 0.0 else (1.0 + BETA_SQ) * p * r / den


def mean(vals):
    s = 0.0
    for v in vals:
        s += v
    return s / len(vals)


def main():
    os.makedirs("pred", exist_ok=True)
    os.makedirs("gt", exist_ok=True)
    data = []
    for name, (pred, gt) in sorted(images().items()):
        write_pgm(f"pred/{name}.pgm", pred)
        write_pgm(f"gt/{name}.pgm", gt)
        p = [v / 255.0 for row in pred for v in row]
        g = [1 if v == 255 else 0 for row in gt for v in row]
        data.append((p, g))
    # a prediction without ground truth is ignored
    write_pgm("pred/z_unmatched.pgm", [[255] * W for _ in range(H)])

    metrics = [per_image(p, g) for p, g in data]
    curve = []
    for i in range(256):
        t = i / 255
        ps, rs = [], []
        for p, g in data:
            tp, _, fp, fn = counts(p, g, t)
            npos = tp + fn
            if tp + fp == 0:
                ps.append(1.0 if npos == 0 else 0.0)
            else:
                ps.append(tp / (tp + fp))
            rs.append(1.0 if npos == 0 else tp / npos)
        pm, rm = mean(ps), mean(rs)
        curve.append((t, pm, rm, f_beta(pm, rm)))
    f_max = 0.0
    for c in curve:
        f_max = max(f_max, c[3])
    bers = [m[3] for m in metrics if m[3] is not None]
    iou = mean([m[0] for m in metrics])
    pa = mean([m[1] for m in metrics])
    mae = mean([m[2] for m in metrics])
    ber = "undefined" if not bers else f"{mean(bers):.6f}"

    rows = [("IoU", f"{iou:.6f}"), ("PA", f"{pa:.6f}"), ("F_beta_max", f"{f_max:.6f}"),
            ("MAE", f"{mae:.6f}"), ("BER", ber), ("images", str(len(data))),
            ("ber_images", str(len(bers)))]
    with open("report.txt", "w") as f:
        f.write(f"{'metric':<12}{'value':>12}\n")
        for k, v in rows:
            f.write(f"{k:<12}{v:>12}\n")
    with open("report.csv", "w") as f:
        f.write("metric,value\n")
        f.write(f"iou,{iou:.6f}\npa,{pa:.6f}\nf_beta_max,{f_max:.6f}\nmae,{mae:.6f}\n")
        f.write(f"ber,{ber}\nimages,{len(data)}\nber_images,{len(bers)}\n")
    with open("report_curve.csv", "w") as f:
        f.write("threshold,precision,recall,f_beta\n")
        for t, p, r, fb in curve:
            f.write(f"{t:.6f},{p:.6f},{r:.6f},{fb:.6f}\n")


if __name__ == "__main__":
    main()
