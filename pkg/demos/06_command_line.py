"""The same pipeline through the command line, in a temporary directory."""
import tempfile
from pathlib import Path

from mutualvpr.cli import main

tmp = Path(tempfile.mkdtemp())
small = ["--set", "num_cells=20", "--set", "epochs=3", "--set", "iterations_per_epoch=50"]

main(["synth-gen", "--out", str(tmp / "world"), "--seed", "2", *small])
main(["train", "--config", str(tmp / "world" / "run.cfg"), "--dataset", str(tmp / "world" / "train.manifest"),
      "--out", str(tmp / "run")])
for name in ("database", "queries"):
    main(["embed", "--checkpoint", str(tmp / "run" / "checkpoint.mvpr"),
          "--manifest", str(tmp / "world" / f"{name}.manifest"), "--out", str(tmp / f"{name}.db")])
main(["eval", "--db", str(tmp / "database.db"), "--queries", str(tmp / "queries.db"),
      "--query-manifest", str(tmp / "world" / "queries.manifest"), "--k", "1,5,10"])
main(["analyze", "--before", str(tmp / "run" / "clusters" / "epoch_000.json"),
      "--after", str(tmp / "run" / "clusters" / "epoch_003.json")])
print(open(tmp / "run" / "metrics.tsv").read(), end="")

# a second run into the same directory is refused
print("exit code on overwrite:", main(["train", "--config", str(tmp / "world" / "run.cfg"),
                                      "--dataset", str(tmp / "world" / "train.manifest"), "--out", str(tmp / "run")]))
