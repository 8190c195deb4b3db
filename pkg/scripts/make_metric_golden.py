"""Freeze coco-caption scores for the metric fixture (needs ``pip install pycocoevalcap``).

Run from the repository root:  python scripts/make_metric_golden.py
"""

import json
from pathlib import Path

from pycocoevalcap.bleu.bleu import Bleu
from pycocoevalcap.cider.cider import Cider
from pycocoevalcap.rouge.rouge import Rouge

data_dir = Path(__file__).resolve().parents[1] / "tests" / "data"
fixture = json.loads((data_dir / "metric_fixture.json").read_text())
res = {k: [v] for k, v in fixture["candidates"].items()}
gts = fixture["references"]

b, _ = Bleu(4).compute_score(gts, res, verbose=0)
r, _ = Rouge().compute_score(gts, res)
c, per_item = Cider().compute_score(gts, res)
# candidate equal to the sole reference of img03; df depends on references only
self_res = dict(res, img03=[gts["img03"][0]])
_, self_items = Cider().compute_score(gts, self_res)

golden = {
    "bleu1": b[0], "bleu2": b[1], "bleu3": b[2], "bleu4": b[3],
    "rougeL": float(r), "cider": float(c),
    "cider_self_img03": float(dict(zip(sorted(gts), self_items))["img03"]),
    "cider_per_item": dict(zip(sorted(gts), map(float, per_item))) if list(gts) == sorted(gts) else None,
}
(data_dir / "metric_golden.json").write_text(json.dumps(golden, indent=2, sort_keys=True) + "\n")
print(json.dumps(golden, indent=2))
