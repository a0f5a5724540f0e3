#!/usr/bin/env python3
"""Convert the Cora citation dataset into the gdkm dataset directory format.

Two input flavors are supported:

1. The raw LINQS files (`cora.content`, `cora.cites`). A Planetoid-style
   split is generated: 20 seeded training nodes per class, 500 validation
   nodes, 1000 test nodes.

       python scripts/convert_cora.py --content cora.content \
           --cites cora.cites --out crates/gdkm/tests/data/cora

2. A torch_geometric Planetoid root (keeps the exact standard split):

       python scripts/convert_cora.py --planetoid-root /path/to/planetoid \
           --out crates/gdkm/tests/data/cora

Output files: features.csv, edges.txt, labels.csv, splits.json.
"""

import argparse
import json
import random
from pathlib import Path


def write_dataset(out, features, edges, labels, split):
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "features.csv", "w") as fh:
        for row in features:
            fh.write(",".join(format(v, "g") for v in row) + "\n")
    with open(out / "edges.txt", "w") as fh:
        for u, v in edges:
            fh.write(f"{u} {v}\n")
    with open(out / "labels.csv", "w") as fh:
        for l in labels:
            fh.write(f"{l}\n")
    with open(out / "splits.json", "w") as fh:
        json.dump(split, fh)
    n_und = len({(min(u, v), max(u, v)) for u, v in edges if u != v})
    print(f"wrote {len(labels)} nodes, {n_und} undirected edges, "
          f"{len(set(labels))} classes to {out}")


def from_linqs(content_path, cites_path, out, seed):
    ids, features, raw_labels = [], [], []
    with open(content_path) as fh:
        for line in fh:
            parts = line.strip().split("\t")
            ids.append(parts[0])
            features.append([float(x) for x in parts[1:-1]])
            raw_labels.append(parts[-1])
    index = {pid: i for i, pid in enumerate(ids)}
    classes = sorted(set(raw_labels))
    labels = [classes.index(l) for l in raw_labels]
    edges = []
    skipped = 0
    with open(cites_path) as fh:
        for line in fh:
            a, b = line.split()
            if a in index and b in index:
                edges.append((index[a], index[b]))
            else:
                skipped += 1
    if skipped:
        print(f"note: skipped {skipped} citation rows with unknown ids")

    rng = random.Random(seed)
    per_class = {}
    for i, l in enumerate(labels):
        per_class.setdefault(l, []).append(i)
    train = []
    for l in sorted(per_class):
        rows = per_class[l][:]
        rng.shuffle(rows)
        train.extend(rows[:20])
    train = sorted(train)
    rest = [i for i in range(len(labels)) if i not in set(train)]
    rng.shuffle(rest)
    split = {
        "train": train,
        "val": sorted(rest[:500]),
        "test": sorted(rest[500:1500]),
    }
    write_dataset(out, features, edges, labels, split)


def from_planetoid(root, out):
    import torch  # noqa: deferred import, only needed for this path
    from torch_geometric.datasets import Planetoid

    ds = Planetoid(root=str(root), name="Cora")[0]
    features = ds.x.numpy().tolist()
    labels = ds.y.numpy().tolist()
    edges = ds.edge_index.t().numpy().tolist()
    mask = lambda m: sorted(int(i) for i in m.nonzero().flatten())
    split = {
        "train": mask(ds.train_mask),
        "val": mask(ds.val_mask),
        "test": mask(ds.test_mask),
    }
    write_dataset(out, features, edges, labels, split)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--content", type=Path, help="LINQS cora.content file")
    ap.add_argument("--cites", type=Path, help="LINQS cora.cites file")
    ap.add_argument("--planetoid-root", type=Path,
                    help="torch_geometric Planetoid root (exact standard split)")
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    if args.planetoid_root:
        from_planetoid(args.planetoid_root, args.out)
    elif args.content and args.cites:
        from_linqs(args.content, args.cites, args.out, args.seed)
    else:
        ap.error("provide either --planetoid-root or both --content and --cites")


if __name__ == "__main__":
    main()
