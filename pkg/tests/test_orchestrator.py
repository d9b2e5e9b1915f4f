"""Run management: config parsing, checkpoint round-trips and validation,
run determinism, protocol aggregation, and the CLI surface."""

import json
from pathlib import Path

import numpy as np
import pytest

from swladapt import cli
from swladapt.config import ConfigError, DataConfig, ExperimentConfig, load_config
from swladapt.data import SyntheticSpec
from swladapt.networks import ArchitectureSpec, init_bundle
from swladapt.orchestrator import (
    assemble_run_data,
    compare_methods,
    load_checkpoint,
    run_protocol,
    run_single,
    save_checkpoint,
)
from swladapt.training import Hyperparams

TINY_SYNTH = SyntheticSpec(windows_per_user=60, window_len=32, seed=7)
TINY_ARCH = ArchitectureSpec(
    in_channels=3, window_len=32, num_classes=3,
    conv_filters=(8, 16, 8), conv_kernels=(8, 5, 3), conv_strides=(2, 2, 1),
    disc_hidden=(16,), allocator_hidden=5,
)


def tiny_config(**overrides):
    base = dict(
        method="swl-adapt",
        new_users=("t0",),
        seeds=(1,),
        hyper=Hyperparams(batch_per_domain=8, total_steps=20, confidence=0.5),
        arch=TINY_ARCH,
        data=DataConfig(synthetic=TINY_SYNTH),
        output_dir="unused",
        convergence_interval=5,
    )
    base.update(overrides)
    return ExperimentConfig(**base)


CONFIG_TEXT = """
[experiment]
method = dann
protocol = fixed-new-user-set
new_users = t0 t1
seeds = 1 2
output_dir = {out}
threads = 2

[hyperparams]
batch_per_domain = 16
total_steps = 50
confidence = 0.8

[synthetic]
windows_per_user = 40
target_users = 2
seed = 3
"""


class TestConfig:
    def test_round_trip(self, tmp_path):
        path = tmp_path / "exp.ini"
        path.write_text(CONFIG_TEXT.format(out=tmp_path / "runs"))
        config = load_config(path)
        assert config.method == "dann"
        assert config.new_users == ("t0", "t1")
        assert config.seeds == (1, 2)
        assert config.hyper.batch_per_domain == 16
        assert config.hyper.confidence == 0.8
        assert config.data.synthetic.target_users == 2
        assert config.threads == 2

    def test_defaults_match_standard_values(self):
        hyper = Hyperparams()
        assert hyper.batch_per_domain == 128
        assert hyper.total_steps == 1000
        assert hyper.confidence == 0.7
        assert hyper.allocator_lr == hyper.model_lr == 1e-3
        assert hyper.zero_guard == 1.0
        arch = ArchitectureSpec(in_channels=3, window_len=128, num_classes=6)
        assert arch.conv_filters == (128, 256, 128)
        assert arch.disc_hidden == (500, 500)
        assert arch.allocator_hidden == 5

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "exp.ini"
        path.write_text("[hyperparams]\nbogus = 3\n")
        with pytest.raises(ConfigError):
            load_config(path)

    def test_unknown_method_rejected(self, tmp_path):
        path = tmp_path / "exp.ini"
        path.write_text("[experiment]\nmethod = mystery\n")
        with pytest.raises(ConfigError):
            load_config(path)

    def test_missing_file_rejected(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "absent.ini")


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        bundle = init_bundle(TINY_ARCH, seed=4)
        bundle.bn_state["f.bn1.mean"][:] = 0.25
        save_checkpoint(bundle, tmp_path / "ck", step=17)
        loaded, step = load_checkpoint(tmp_path / "ck")
        assert step == 17
        assert loaded.arch == bundle.arch
        for name in bundle.params:
            assert np.array_equal(loaded.params[name], bundle.params[name])
        for name in bundle.bn_state:
            assert np.array_equal(loaded.bn_state[name], bundle.bn_state[name])

    def test_edited_shape_rejected(self, tmp_path):
        bundle = init_bundle(TINY_ARCH, seed=4)
        save_checkpoint(bundle, tmp_path / "ck")
        manifest = json.loads((tmp_path / "ck.json").read_text())
        manifest["params"][0]["shape"][0] += 1
        (tmp_path / "ck.json").write_text(json.dumps(manifest))
        with pytest.raises(ConfigError):
            load_checkpoint(tmp_path / "ck")

    def test_wrong_class_count_names_parameter(self, tmp_path):
        bundle = init_bundle(TINY_ARCH, seed=4)
        save_checkpoint(bundle, tmp_path / "ck")
        with pytest.raises(ConfigError, match="c.out.b"):
            load_checkpoint(tmp_path / "ck", expected_num_classes=7)

    def test_truncated_payload_rejected(self, tmp_path):
        bundle = init_bundle(TINY_ARCH, seed=4)
        save_checkpoint(bundle, tmp_path / "ck")
        blob = (tmp_path / "ck.bin").read_bytes()
        (tmp_path / "ck.bin").write_bytes(blob[: len(blob) // 2])
        with pytest.raises(ConfigError):
            load_checkpoint(tmp_path / "ck")


class TestRunSingle:
    def test_smoke_and_artifacts(self, tmp_path):
        config = tiny_config(output_dir=str(tmp_path))
        report, trace = run_single(config, "t0", 1, out_dir=tmp_path / "run")
        assert 0.0 <= report.accuracy <= 1.0
        assert 0.0 <= report.macro_f1 <= 1.0
        assert (tmp_path / "run" / "checkpoint.json").exists()
        assert (tmp_path / "run" / "train_log.jsonl").exists()
        assert (tmp_path / "run" / "convergence.csv").exists()
        assert len(trace.steps) == 4  # 20 steps, interval 5
        log_lines = (tmp_path / "run" / "train_log.jsonl").read_text().strip().splitlines()
        assert len(log_lines) == 20
        first = json.loads(log_lines[0])
        assert {"step", "lr", "loss_cls", "loss_wd", "n_selected"} <= set(first)

    def test_determinism_across_runs(self, tmp_path):
        config = tiny_config(output_dir=str(tmp_path))
        a, _ = run_single(config, "t0", 1, out_dir=tmp_path / "a")
        b, _ = run_single(config, "t0", 1, out_dir=tmp_path / "b")
        assert a.accuracy == b.accuracy
        assert a.macro_f1 == b.macro_f1
        assert a.a_distance == b.a_distance
        ck_a = (tmp_path / "a" / "checkpoint.bin").read_bytes()
        ck_b = (tmp_path / "b" / "checkpoint.bin").read_bytes()
        assert ck_a == ck_b

    def test_unknown_user_rejected(self, tmp_path):
        config = tiny_config(output_dir=str(tmp_path))
        from swladapt.data import DataError

        with pytest.raises(DataError):
            run_single(config, "nobody", 1)

    def test_dann_run_has_no_allocator(self, tmp_path):
        config = tiny_config(method="dann", output_dir=str(tmp_path))
        run_single(config, "t0", 1, out_dir=tmp_path / "run")
        manifest = json.loads((tmp_path / "run" / "checkpoint.json").read_text())
        names = [p["name"] for p in manifest["params"]]
        assert not any(n.startswith("w.") for n in names)
        log = (tmp_path / "run" / "train_log.jsonl").read_text()
        assert '"eta_mean_source"' not in log


class TestProtocol:
    def test_counts_and_summary(self, tmp_path):
        config = tiny_config(
            output_dir=str(tmp_path / "proto"),
            seeds=(1, 2),
            new_users=("t0", "t1"),
            data=DataConfig(synthetic=SyntheticSpec(
                windows_per_user=60, window_len=32, target_users=2, seed=7)),
        )
        rows, summary = run_protocol(config)
        assert len(rows) == 4
        results = (tmp_path / "proto" / "results.csv").read_text().strip().splitlines()
        assert len(results) == 5 and results[0].startswith("method,new_user,seed")
        assert summary[0]["runs"] == 4

    def test_aggregate_identical_rows_zero_std(self, tmp_path):
        out = tmp_path / "results.csv"
        out.write_text(
            "method,new_user,seed,accuracy,macro_f1,a_distance,runtime_seconds\n"
            "dann,u,1,0.5,0.4,1.0,1.0\n"
            "dann,u,2,0.5,0.4,1.0,2.0\n"
        )
        from swladapt.orchestrator import summarize_results

        summary = summarize_results(out)
        assert summary[0]["accuracy_std"] == 0.0

    def test_compare_methods_paired(self, tmp_path):
        out = tmp_path / "results.csv"
        out.write_text(
            "method,new_user,seed,accuracy,macro_f1,a_distance,runtime_seconds\n"
            "a,u,1,0.6,0.5,1.0,1.0\n"
            "a,u,2,0.7,0.6,1.0,1.0\n"
            "b,u,1,0.5,0.4,1.0,1.0\n"
            "b,u,2,0.6,0.5,1.0,1.0\n"
        )
        outcome = compare_methods(out, "a", "b")
        assert outcome["pairs"] == 2
        t, p = outcome["accuracy"]
        assert p == 0.0  # constant difference convention


class TestSplitsIntegration:
    def test_split_sizes_follow_ratios(self):
        config = tiny_config()
        data = assemble_run_data(config, "t0", seed=1)
        n_src = len(data.source_train) + len(data.source_val)
        assert len(data.source_train) == int(0.8 * n_src)
        n_tgt = len(data.target_adapt) + len(data.target_test)
        assert len(data.target_adapt) == -(-n_tgt // 2)


class TestCli:
    def _config_file(self, tmp_path, method="swl-adapt", steps=12):
        path = tmp_path / "exp.ini"
        path.write_text(f"""
[experiment]
method = {method}
new_users = t0
seeds = 1
output_dir = {tmp_path / 'runs'}

[hyperparams]
batch_per_domain = 6
total_steps = {steps}
confidence = 0.5

[synthetic]
windows_per_user = 50
window_len = 32
seed = 7
""")
        return path

    def test_train_and_exports(self, tmp_path, capsys):
        config = self._config_file(tmp_path)
        assert cli.main(["train", "--config", str(config)]) == 0
        run_dir = tmp_path / "runs" / "swl-adapt_t0_seed1"
        assert (run_dir / "checkpoint.json").exists()
        assert cli.main([
            "export-surface", "--config", str(config),
            "--checkpoint", str(run_dir / "checkpoint"),
            "--resolution", "4", "--out", str(tmp_path / "surface"),
        ]) == 0
        surface = (tmp_path / "surface" / "weight_surface.csv").read_text().strip().splitlines()
        assert len(surface) == 17
        assert cli.main([
            "export-features", "--config", str(config),
            "--checkpoint", str(run_dir / "checkpoint"),
            "--out", str(tmp_path / "feats"),
        ]) == 0
        assert (tmp_path / "feats" / "features_target_test.csv").exists()

    def test_synth_writes_cache(self, tmp_path, capsys):
        config = self._config_file(tmp_path)
        assert cli.main(["synth", "--config", str(config), "--out", str(tmp_path / "cache")]) == 0
        assert (tmp_path / "cache" / "windows.json").exists()

    def test_report_over_protocol_results(self, tmp_path, capsys):
        config = self._config_file(tmp_path, steps=8)
        assert cli.main(["protocol", "--config", str(config)]) == 0
        assert cli.main(["report", "--results", str(tmp_path / "runs" / "results.csv")]) == 0
        out = capsys.readouterr().out
        assert "swl-adapt" in out

    def test_config_error_exit_code(self, tmp_path):
        bad = tmp_path / "bad.ini"
        bad.write_text("[experiment]\nmethod = nonsense\n")
        assert cli.main(["train", "--config", str(bad)]) == 1

    def test_data_error_exit_code(self, tmp_path):
        config = self._config_file(tmp_path)
        assert cli.main(["train", "--config", str(config), "--new-user", "ghost"]) == 2

    def test_missing_results_exit_code(self, tmp_path):
        assert cli.main(["report", "--results", str(tmp_path / "none.csv")]) == 2
