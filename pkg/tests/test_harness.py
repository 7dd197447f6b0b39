"""End-to-end tests for run configs, manifests, and the CLI.

Every CLI run goes through ``main(argv)`` with outputs under tmp_path, so
exit codes, produced files, manifest inventories, and byte-level determinism
are all observable without spawning subprocesses.
"""
from __future__ import annotations

import hashlib
import json

import numpy as np
import pytest

from metadiv.cli import SUBCOMMANDS, main
from metadiv.errors import InsufficientDataError
from metadiv.gaussbench import BenchmarkSpec
from metadiv.harness import ConfigError, RunManifest, load_config, run_correlate
from metadiv.harness.config import RunConfig, SeedSet
from metadiv.harness.manifest import sha256_file

SEEDS = {"benchmark": 1, "train": 2, "eval": 3, "probe": 4}
TINY_MODEL = {"input_size": 1, "hidden_sizes": [8, 8], "output_size": 5}


def write_config(tmp_path, payload, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(payload))
    return str(path)


def div_sweep_payload(**over):
    payload = {
        "experiment": "div_sweep",
        "seeds": dict(SEEDS),
        "benchmarks": [[0, 1, 1, 1], [0, 3, 1, 1], [0, 10, 1, 1]],
        "model": dict(TINY_MODEL),
        "n_tasks": 4,
        "n_pairs": 500,
        "n_mc": 1,
    }
    payload.update(over)
    return payload


class TestRunConfig:
    def test_minimal_valid(self, tmp_path):
        cfg = load_config(write_config(tmp_path, div_sweep_payload()))
        assert isinstance(cfg, RunConfig)
        assert cfg.experiment == "div_sweep"
        assert cfg.seeds == SeedSet(1, 2, 3, 4)
        assert cfg.benchmarks == (
            BenchmarkSpec(0, 1, 1, 1),
            BenchmarkSpec(0, 3, 1, 1),
            BenchmarkSpec(0, 10, 1, 1),
        )
        assert cfg.n_pairs == 500
        assert cfg.plots is True  # default

    def test_unknown_key_rejected(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(write_config(tmp_path, div_sweep_payload(tasks_n=4)))

    def test_missing_required_sections(self, tmp_path):
        bad = div_sweep_payload()
        del bad["seeds"]
        with pytest.raises(ConfigError):
            load_config(write_config(tmp_path, bad))
        bad = div_sweep_payload()
        del bad["experiment"]
        with pytest.raises(ConfigError):
            load_config(write_config(tmp_path, bad))

    def test_seed_names_must_be_exact(self, tmp_path):
        short = div_sweep_payload(seeds={"benchmark": 1, "train": 2, "eval": 3})
        with pytest.raises(ConfigError):
            load_config(write_config(tmp_path, short))
        extra = div_sweep_payload(seeds={**SEEDS, "extra": 9})
        with pytest.raises(ConfigError):
            load_config(write_config(tmp_path, extra))

    def test_unknown_experiment(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(write_config(tmp_path, div_sweep_payload(experiment="sweep")))

    def test_benchmarks_required_except_pathology_and_correlate(self, tmp_path):
        empty = div_sweep_payload(benchmarks=[])
        with pytest.raises(ConfigError):
            load_config(write_config(tmp_path, empty))
        ok = {"experiment": "pathology", "seeds": dict(SEEDS)}
        assert load_config(write_config(tmp_path, ok)).experiment == "pathology"

    def test_correlate_needs_sweep_csv(self, tmp_path):
        bad = {"experiment": "correlate", "seeds": dict(SEEDS)}
        with pytest.raises(ConfigError):
            load_config(write_config(tmp_path, bad))

    def test_benchmark_arity(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(write_config(tmp_path, div_sweep_payload(benchmarks=[[0, 1, 1]])))

    def test_bad_subsection(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(write_config(tmp_path, div_sweep_payload(maml={"warmup": 3})))

    def test_bad_adaptation(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(
                write_config(tmp_path, div_sweep_payload(adapt_a={"kind": "finetune"}))
            )
        cfg = load_config(
            write_config(tmp_path, div_sweep_payload(adapt_a={"kind": "maml_k", "steps": 5}))
        )
        assert cfg.adapt_a.label == "maml_5"

    def test_bad_train_method(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(write_config(tmp_path, div_sweep_payload(train_methods=["sgd"])))

    def test_file_problems(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "absent.json")
        broken = tmp_path / "broken.json"
        broken.write_text("{not json")
        with pytest.raises(ConfigError):
            load_config(broken)

    def test_echo_is_serializable_and_complete(self, tmp_path):
        cfg = load_config(write_config(tmp_path, div_sweep_payload()))
        echo = cfg.echo()
        text = json.dumps(echo, sort_keys=True)
        back = json.loads(text)
        assert back["benchmarks"] == [[0, 1, 1, 1], [0, 3, 1, 1], [0, 10, 1, 1]]
        assert back["seeds"] == SEEDS
        assert back["experiment"] == "div_sweep"


class TestManifest:
    def test_lifecycle_and_inventory(self, tmp_path):
        m = RunManifest.start("div_sweep", {"k": 1}, tmp_path)
        running = json.loads((tmp_path / "manifest.json").read_text())
        assert running["status"] == "running"
        assert running["prng_algorithm"] == "pcg64"
        (tmp_path / "out.csv").write_text("a,b\n1,2\n")
        m.finalize(tmp_path, "completed")
        done = json.loads((tmp_path / "manifest.json").read_text())
        assert done["status"] == "completed"
        assert done["error"] is None
        assert done["wall_clock_seconds"] >= 0.0
        names = [f["path"] for f in done["files"]]
        assert names == ["out.csv"]  # the manifest never lists itself
        want = hashlib.sha256((tmp_path / "out.csv").read_bytes()).hexdigest()
        assert done["files"][0]["sha256"] == want
        assert done["files"][0]["bytes"] == len("a,b\n1,2\n")

    def test_start_clears_stale_error(self, tmp_path):
        (tmp_path / "error.json").write_text("{}")
        RunManifest.start("train", {}, tmp_path)
        assert not (tmp_path / "error.json").exists()

    def test_sha256_file_oracle(self, tmp_path):
        p = tmp_path / "blob.bin"
        p.write_bytes(b"\x00\x01\x02metadiv")
        assert sha256_file(p) == hashlib.sha256(b"\x00\x01\x02metadiv").hexdigest()


class TestCliDivSweep:
    def run_sweep(self, tmp_path, out_name, extra_args=(), **payload_over):
        cfg = write_config(tmp_path, div_sweep_payload(**payload_over),
                           name=f"{out_name}.json")
        out = tmp_path / out_name
        code = main(["div-sweep", "--config", cfg, "--out", str(out), *extra_args])
        return code, out

    def test_end_to_end(self, tmp_path):
        code, out = self.run_sweep(tmp_path, "run1")
        assert code == 0
        sweep = out / "sweep.csv"
        assert sweep.exists() and (out / "sweep.png").exists()
        header = sweep.read_text().splitlines()[0]
        assert header == (
            "mu_m,sigma_m,mu_s,sigma_s,hellinger_div,hellinger_ci,"
            "task2vec_div,task2vec_ci,n_pairs"
        )
        assert len(sweep.read_text().splitlines()) == 4  # header + 3 specs
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["status"] == "completed"
        by_name = {f["path"]: f for f in manifest["files"]}
        assert set(by_name) == {"sweep.csv", "sweep.png"}
        for name, entry in by_name.items():
            assert entry["sha256"] == sha256_file(out / name)

    def test_no_plots(self, tmp_path):
        code, out = self.run_sweep(tmp_path, "run_np", extra_args=("--no-plots",))
        assert code == 0
        assert (out / "sweep.csv").exists()
        assert not (out / "sweep.png").exists()

    def test_byte_identical_rerun(self, tmp_path):
        _, out1 = self.run_sweep(tmp_path, "rep1")
        _, out2 = self.run_sweep(tmp_path, "rep2")
        assert (out1 / "sweep.csv").read_bytes() == (out2 / "sweep.csv").read_bytes()
        assert (out1 / "sweep.png").read_bytes() == (out2 / "sweep.png").read_bytes()

    def test_seed_override(self, tmp_path):
        _, base = self.run_sweep(tmp_path, "so_base")
        code, over = self.run_sweep(tmp_path, "so_17", extra_args=("--seed-override", "17"))
        assert code == 0
        manifest = json.loads((over / "manifest.json").read_text())
        assert manifest["config"]["seeds"] == {
            "benchmark": 17, "train": 18, "eval": 19, "probe": 20,
        }
        assert (base / "sweep.csv").read_bytes() != (over / "sweep.csv").read_bytes()
        _, again = self.run_sweep(tmp_path, "so_17b", extra_args=("--seed-override", "17"))
        assert (over / "sweep.csv").read_bytes() == (again / "sweep.csv").read_bytes()

    def test_out_dir_from_config(self, tmp_path):
        dest = tmp_path / "from_config"
        cfg = write_config(tmp_path, div_sweep_payload(out_dir=str(dest)), name="oc.json")
        assert main(["div-sweep", "--config", cfg, "--no-plots"]) == 0
        assert (dest / "sweep.csv").exists()


class TestCliErrors:
    def test_missing_config_is_usage_error(self, tmp_path, capsys):
        code = main(["div-sweep", "--config", str(tmp_path / "none.json")])
        assert code == 2
        err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert err["error"]["type"] == "ConfigError"

    def test_malformed_json_is_usage_error(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{]")
        assert main(["div-sweep", "--config", str(bad)]) == 2

    def test_unknown_key_is_usage_error(self, tmp_path):
        cfg = write_config(tmp_path, div_sweep_payload(bogus=1))
        assert main(["div-sweep", "--config", cfg]) == 2

    def test_subcommand_experiment_mismatch(self, tmp_path):
        cfg = write_config(tmp_path, div_sweep_payload())
        assert main(["train", "--config", cfg]) == 2

    def test_runtime_failure_writes_error_json(self, tmp_path, capsys):
        sweep = tmp_path / "short.csv"
        sweep.write_text(
            "mu_m,sigma_m,mu_s,sigma_s,hellinger_div,hellinger_ci,task2vec_div,task2vec_ci,n_pairs\n"
            "0.0,1.0,1.0,1.0,0.1,0.0,0.2,0.0,6\n"
            "0.0,3.0,1.0,1.0,0.5,0.0,0.4,0.0,6\n"
        )
        cfg = write_config(tmp_path, {
            "experiment": "correlate",
            "seeds": dict(SEEDS),
            "sweep_csv": str(sweep),
        })
        out = tmp_path / "corr_fail"
        code = main(["correlate", "--config", cfg, "--out", str(out)])
        assert code == 1
        err = json.loads((out / "error.json").read_text())
        assert err["error"]["type"] == "InsufficientDataError"
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["status"] == "failed"
        assert manifest["error"]["type"] == "InsufficientDataError"
        stderr = capsys.readouterr().err
        assert "InsufficientDataError" in stderr


class TestCorrelate:
    def write_sweep(self, tmp_path, hell, t2v):
        path = tmp_path / "sweep.csv"
        lines = [
            "mu_m,sigma_m,mu_s,sigma_s,hellinger_div,hellinger_ci,task2vec_div,task2vec_ci,n_pairs"
        ]
        for i, (h, t) in enumerate(zip(hell, t2v)):
            lines.append(f"0.0,{float(i)},1.0,1.0,{h!r},0.0,{t!r},0.0,6")
        path.write_text("\n".join(lines) + "\n")
        return path

    def test_pearson_matches_numpy(self, tmp_path):
        hell = [0.1, 0.2, 0.35, 0.7]
        t2v = [0.21, 0.38, 0.6, 0.99]
        path = self.write_sweep(tmp_path, hell, t2v)
        r, report = run_correlate(path, tmp_path)
        assert r == pytest.approx(np.corrcoef(hell, t2v)[0, 1], abs=1e-12)
        saved = json.loads((tmp_path / "correlate.json").read_text())
        assert saved["pearson_r"] == r
        assert saved["n_rows"] == 4 == report["n_rows"]

    def test_too_few_rows(self, tmp_path):
        path = self.write_sweep(tmp_path, [0.1, 0.2], [0.2, 0.3])
        with pytest.raises(InsufficientDataError):
            run_correlate(path)

    def test_cli_exit_zero(self, tmp_path):
        path = self.write_sweep(tmp_path, [0.1, 0.2, 0.3], [0.2, 0.4, 0.6])
        cfg = write_config(tmp_path, {
            "experiment": "correlate",
            "seeds": dict(SEEDS),
            "sweep_csv": str(path),
        })
        out = tmp_path / "corr"
        assert main(["correlate", "--config", cfg, "--out", str(out)]) == 0
        assert (out / "correlate.json").exists()


class TestCliHist:
    def test_histogram_outputs(self, tmp_path):
        cfg = write_config(tmp_path, {
            "experiment": "histogram",
            "seeds": dict(SEEDS),
            "benchmarks": [[0, 3, 1, 1]],
            "model": {"input_size": 1, "hidden_sizes": [4, 4], "output_size": 5},
            "n_tasks": 5,
            "n_mc": 1,
            "hist_bins": 6,
            "dump_embeddings": True,
        })
        out = tmp_path / "hist"
        assert main(["hist", "--config", cfg, "--out", str(out), "--no-plots"]) == 0
        hist_lines = (out / "histogram.csv").read_text().splitlines()
        assert hist_lines[0] == "bin_lo,bin_hi,count"
        assert len(hist_lines) == 7
        counts = sum(int(line.split(",")[2]) for line in hist_lines[1:])
        assert counts == 10  # C(5, 2) pairs
        summary = json.loads((out / "diversity.json").read_text())
        assert summary["n_tasks"] == 5 and summary["n_pairs"] == 10
        embs = json.loads((out / "embeddings.json").read_text())
        assert len(embs) == 5
        # feature-layer parameter count of the 1 -> 4 -> 4 probe
        assert all(len(e["values"]) == 28 for e in embs)
        assert (out / "pairwise_distances.csv").exists()


class TestCliPathology:
    def test_grid_outputs(self, tmp_path):
        cfg = write_config(tmp_path, {
            "experiment": "pathology",
            "seeds": dict(SEEDS),
            "pathology_dims": [4],
            "pathology_n_points": [50, 40],
            "pathology_n_seeds": 10,
        })
        out = tmp_path / "path"
        assert main(["pathology", "--config", cfg, "--out", str(out), "--no-plots"]) == 0
        lines = (out / "pathology.csv").read_text().splitlines()
        assert lines[0] == "n_features,n_examples,similarity,n_seeds"
        assert len(lines) == 3


@pytest.fixture(scope="module")
def trained_dir(tmp_path_factory):
    """One tiny CLI training run shared by the eval and repsim chain tests."""
    root = tmp_path_factory.mktemp("chain")
    cfg = write_config(root, {
        "experiment": "train",
        "seeds": dict(SEEDS),
        "benchmarks": [[0, 3, 1, 1]],
        "model": dict(TINY_MODEL),
        "maml": {"iterations": 2, "meta_batch": 2, "inner_steps": 2,
                 "eval_interval": 5, "n_val_tasks": 2},
        "usl": {"epochs": 1, "batch_size": 10000, "n_val_tasks": 2},
    }, name="train.json")
    out = root / "train"
    code = main(["train", "--config", cfg, "--out", str(out), "--no-plots"])
    assert code == 0
    return root, out


class TestCliTrainChain:
    def test_train_outputs(self, trained_dir):
        _, out = trained_dir
        for name in ("maml_0.json", "maml_curve_0.csv", "usl_0.json", "usl_curve_0.csv"):
            assert (out / name).exists(), name
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["status"] == "completed"
        curve = (out / "maml_curve_0.csv").read_text().splitlines()
        assert curve[0] == "iteration_or_epoch,split,loss,accuracy"
        # 2 train points + final val point
        assert len(curve) == 4

    def test_eval_matrix_from_checkpoints(self, trained_dir):
        root, out = trained_dir
        cfg = write_config(root, {
            "experiment": "eval_matrix",
            "seeds": dict(SEEDS),
            "benchmarks": [[0, 3, 1, 1]],
            "model": dict(TINY_MODEL),
            "n_tasks": 3,
            "checkpoints": {"maml": [str(out / "maml_0.json")],
                            "usl": [str(out / "usl_0.json")]},
        }, name="eval.json")
        dest = root / "eval"
        assert main(["eval", "--config", cfg, "--out", str(dest), "--no-plots"]) == 0
        table = (dest / "eval_matrix_0.csv").read_text().splitlines()
        assert table[0] == "init,adaptation,accuracy,ci95,n_tasks"
        assert len(table) == 13  # 3 inits x 4 methods
        labels = {line.split(",")[0] for line in table[1:]}
        assert labels == {"random", "maml", "usl"}
        gaps = (dest / "gaps.csv").read_text().splitlines()
        assert len(gaps) == 2
        assert gaps[1].split(",")[-1] in ("true", "false")

    def test_repsim_from_checkpoints(self, trained_dir):
        root, out = trained_dir
        cfg = write_config(root, {
            "experiment": "repsim",
            "seeds": dict(SEEDS),
            "benchmarks": [[0, 3, 1, 1]],
            "model": dict(TINY_MODEL),
            "checkpoints": {"a": str(out / "maml_0.json"),
                            "b": str(out / "usl_0.json")},
            "adapt_a": {"kind": "none"},
            "adapt_b": {"kind": "none"},
            # 4 tasks: near-rank-deficient tiny layers can lose a task to the
            # CCA overshoot guard, and each cell needs >= 2 survivors
            "repsim_n_tasks": 4,
            "repsim_k_query": 64,
        }, name="repsim.json")
        dest = root / "repsim"
        assert main(["repsim", "--config", cfg, "--out", str(dest), "--no-plots"]) == 0
        lines = (dest / "layer_distances.csv").read_text().splitlines()
        assert lines[0] == (
            "layer,svcca,svcca_ci,pwcca,pwcca_ci,lincka,lincka_ci,opd,opd_ci,risky"
        )
        layers = [line.split(",")[0] for line in lines[1:]]
        assert layers == ["hidden_1", "hidden_2", "head"]
        for line in lines[1:]:
            cells = line.split(",")
            assert cells[-1] in ("true", "false")
            # every metric defined on this benign benchmark
            assert all(c != "" for c in cells[1:9])


class TestSubcommandMap:
    def test_every_experiment_reachable(self):
        assert set(SUBCOMMANDS.values()) == {
            "div_sweep", "train", "eval_matrix", "repsim",
            "pathology", "correlate", "histogram",
        }
