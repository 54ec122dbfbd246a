"""The full experiment pipeline through the command-line interface.

Runs the two training stages, the policy sweep, the decode simulation,
and the report step against one small config, all inside a temporary
directory. Every artifact is deterministic in (config, seed): the sweep is
rerun at the end to show the bytes come out identical.
"""

import json
import tempfile
from pathlib import Path

from kvgate.cli import main
from kvgate.metrics import read_records

CONFIG = {
    "version": 1,
    "seed": 7,
    "teacher": {"n_layers": 2, "d_model": 16, "n_heads": 4,
                "n_kv_heads": 2, "d_ffn": 32, "vocab_size": 12},
    "plan": {"ratio": 0.5, "sink_count": 2, "local_window": 4},
    "data": {"kind": "tokens", "length": 36, "n_train": 4, "n_eval": 3},
    "train": {"h_index": 2, "d_index": 3, "indexer_steps": 30,
              "mem_steps": 40},
    "decode": {"steps": 24, "interval": 8, "budgets": [16, 128]},
}

with tempfile.TemporaryDirectory() as tmp:
    root = Path(tmp)
    config = root / "config.json"
    config.write_text(json.dumps(CONFIG, indent=2), encoding="utf-8")

    def cli(*argv):
        argv = [str(a) for a in argv]
        print("$ kvgate " + " ".join(argv))
        code = main(argv)
        assert code == 0, f"exit {code}"

    out = root / "run"
    cli("train-indexer", "--config", config, "--out", out)
    cli("train-memory", "--config", config, "--out", out,
        "--checkpoint", out / "indexer.kvgt")
    cli("sweep", "--config", config, "--out", out,
        "--checkpoint", out / "memory.kvgt")
    cli("decode-sim", "--config", config, "--out", out,
        "--checkpoint", out / "indexer.kvgt")
    cli("report", out / "sweep.jsonl", out / "decode.jsonl",
        "--out", root / "report")

    (evaluation,) = read_records(out / "train_memory_eval.jsonl")
    print(f"\nheld-out fused loss: {evaluation['loss_init']:.4f} untrained "
          f"-> {evaluation['loss_trained']:.4f} trained")

    sweep = read_records(out / "sweep.jsonl")
    print(f"sweep: {len(sweep)} records over "
          f"{len({r['policy'] for r in sweep})} policies; total bytes at "
          f"r=0 vs r=0.9 for the indexer policy:")
    for rec in sweep:
        if rec["policy"] == "indexer" and rec["ratio"] in (0.0, 0.9):
            print(f"  ratio {rec['ratio']:.1f}: {rec['total_bytes']} bytes, "
                  f"recon_fused {rec['recon_fused']:.5f}")

    first = (out / "sweep.jsonl").read_bytes()
    rerun = root / "again"
    cli("sweep", "--config", config, "--out", rerun,
        "--checkpoint", out / "memory.kvgt")
    same = (rerun / "sweep.jsonl").read_bytes() == first
    print(f"\nsweep rerun byte-identical: {same}")
    assert same
    print("report files:",
          ", ".join(p.name for p in sorted((root / 'report').iterdir())))
