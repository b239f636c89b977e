# Scoring detections against reference lesions: overlap metrics, greedy
# instance matching at an IoU threshold, and size-stratified summaries.

import tempfile
from pathlib import Path

import numpy as np

from voxdiff.evalkit import (
    detection_metrics,
    dice,
    evaluate_case,
    iou,
    match_lesions,
    stratified_eval,
    write_report_csv,
    write_summary_csv,
)
from voxdiff.postprocess import connected_components
from voxdiff.volgrid import BinaryMask


def comps(voxels, shape=(20, 20, 20), spacing=(2.0, 2.0, 2.0)):
    grid = np.zeros(shape, dtype=np.uint8)
    for v in voxels:
        grid[v] = 1
    return connected_components(BinaryMask(grid, spacing))


def ball(center, r):
    cx, cy, cz = center
    return [(x, y, z)
            for x in range(cx - r, cx + r + 1)
            for y in range(cy - r, cy + r + 1)
            for z in range(cz - r, cz + r + 1)
            if (x - cx) ** 2 + (y - cy) ** 2 + (z - cz) ** 2 <= r * r]


# Voxel-level overlap.
a = BinaryMask((np.indices((8, 8, 8))[0] < 4).astype(np.uint8))
b = BinaryMask((np.indices((8, 8, 8))[0] < 6).astype(np.uint8))
print(f"dice = {dice(a, b):.4f}   iou = {iou(a.data, b.data):.4f}")

# Instance-level matching: two predictions, three references. Matching is
# greedy by descending IoU and only pairs above the threshold count.
pred = comps(ball((5, 5, 5), 2) + ball((14, 14, 14), 3))
ref = comps(ball((5, 5, 6), 2) + ball((14, 14, 14), 2) + ball((5, 14, 5), 2))
table = match_lesions(pred, ref, threshold=0.2)
print("\nmatches (pred id, ref id, IoU):",
      [(p, r, round(v, 3)) for p, r, v in table.matches])
print(f"tp={table.tp} fp={table.fp} fn={table.fn}; "
      f"unmatched refs: {table.unmatched_ref}")

# Case-level result: the match table plus whole-case DSC and per-lesion
# diameters for later stratification.
res = evaluate_case("demo_case", pred, ref, threshold=0.2)
print(f"\ncase dsc {res.dsc:.3f}")
print("reference diameters (cm):", [round(d, 2) for d in res.ref_diameters_cm])

# Aggregate a few cases. One perfect, one miss, the mixed case above.
perfect = evaluate_case("p", pred, pred, threshold=0.2)
miss = evaluate_case("m", comps([]), comps(ball((5, 5, 5), 2)), threshold=0.2)
results = [perfect, miss, res]

report = detection_metrics(results)
print(f"\npooled over {report.n_cases} cases: "
      f"recall {report.recall_mean:.3f} +- {report.recall_sd:.3f}, "
      f"dsc {report.dsc_mean:.3f}")

# Stratified by reference lesion size; empty bins drop out of the denominator.
for name, rep in stratified_eval(results).items():
    print(f"  bin {name:>4}: n={rep.n_cases}", end="")
    if rep.n_cases:
        print(f"  recall {rep.recall_mean:.2f}  dsc {rep.dsc_mean:.2f}")
    else:
        print()

with tempfile.TemporaryDirectory() as tmp:
    write_report_csv(Path(tmp) / "report.csv", results)
    write_summary_csv(Path(tmp) / "summary.csv", stratified_eval(results))
    print("\nsummary.csv:")
    print((Path(tmp) / "summary.csv").read_text())
