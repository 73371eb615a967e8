"""Pipeline tests: config validation, training mechanics, inference,
evaluation, and the CLI round trip."""

import json
import math

import numpy as np
import pytest

from trackcast import autodiff as ad
from trackcast import cli, pipeline
from trackcast.errors import ConfigError, DataError
from trackcast.pipeline import ARTIFACT_NAMES, RunConfig


def tiny_config(**overrides):
    base = dict(
        h_past=4, t_future=4, epochs=2, dsf_epochs=2, seed=5,
        samples_per_agent=4, latent_dim=4, frames_per_scene=3,
        scene=dict(agents_min=2, agents_max=3, duration_s=2.0,
                   spawn_extent=20.0, spawn_separation=8.0),
        noise=dict(center_sigma=0.05),
        num_scenes=2, recall_steps=5,
    )
    base.update(overrides)
    return RunConfig(**base)


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    cfg = tiny_config()
    data_dir = tmp_path_factory.mktemp("data")
    pipeline.generate_dataset(cfg, data_dir)
    return cfg, pipeline.load_dataset(data_dir), data_dir


class TestConfig:
    def test_unknown_top_level_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown config keys"):
            RunConfig.from_dict({"warp_speed": 9})

    def test_unknown_nested_key_rejected(self):
        with pytest.raises(ConfigError, match="scene config"):
            RunConfig.from_dict({"scene": {"lanes": 4}})

    def test_bad_sampler_rejected(self):
        with pytest.raises(ConfigError):
            RunConfig(sampler="metropolis")

    def test_json_round_trip(self, tmp_path):
        path = tmp_path / "config.json"
        path.write_text(json.dumps({"epochs": 7, "seed": 3,
                                    "noise": {"miss_rate": 0.1}}))
        cfg = RunConfig.from_json(path)
        assert cfg.epochs == 7
        assert cfg.noise_config().miss_rate == 0.1

    def test_malformed_json_is_config_error(self, tmp_path):
        path = tmp_path / "config.json"
        path.write_text("{not json")
        with pytest.raises(ConfigError):
            RunConfig.from_json(path)


class TestTraining:
    def test_checkpoint_round_trip_after_training(self, tiny_dataset, tmp_path):
        cfg, scenes, _ = tiny_dataset
        store, history = pipeline.train_stage1(cfg, scenes)
        assert len(history) == cfg.epochs
        path = tmp_path / "ckpt.bin"
        ad.save_checkpoint(path, store)
        reloaded = pipeline.build_model(cfg)
        values, _ = ad.load_checkpoint(path)
        reloaded.load_values(values)
        for name in store.names():
            assert reloaded[name].value.tobytes() == store[name].value.tobytes()

    def test_mot_only_training_still_reaches_encoders(self, tiny_dataset):
        cfg, scenes, _ = tiny_dataset
        cfg_mot = tiny_config(use_forecast_head=False, epochs=1)
        store, history = pipeline.train_stage1(cfg_mot, scenes)
        baseline = pipeline.build_model(cfg_mot)
        assert not np.array_equal(store["enc.track.l1.w"].value,
                                  baseline["enc.track.l1.w"].value)

    def test_forecast_only_training_still_reaches_encoders(self, tiny_dataset):
        cfg, scenes, _ = tiny_dataset
        cfg_fc = tiny_config(use_mot_head=False, epochs=1)
        store, _ = pipeline.train_stage1(cfg_fc, scenes)
        baseline = pipeline.build_model(cfg_fc)
        assert not np.array_equal(store["enc.track.l1.w"].value,
                                  baseline["enc.track.l1.w"].value)

    def test_stage2_freezes_backbone_bit_exactly(self, tiny_dataset):
        cfg, scenes, _ = tiny_dataset
        store, _ = pipeline.train_stage1(cfg, scenes)
        before = {n: store[n].value.copy() for n in store.names()
                  if not n.startswith("dsf.")}
        dsf_before = store["dsf.l1.w"].value.copy()
        store, history, omega = pipeline.train_stage2_dsf(cfg, store, scenes)
        assert omega > 0
        assert len(history) == cfg.dsf_epochs
        for name, value in before.items():
            assert store[name].value.tobytes() == value.tobytes()
        assert not np.array_equal(store["dsf.l1.w"].value, dsf_before)

    def test_zero_dsf_epochs_changes_nothing(self, tiny_dataset):
        cfg, scenes, _ = tiny_dataset
        store, _ = pipeline.train_stage1(tiny_config(epochs=1), scenes)
        dsf_before = store["dsf.l1.w"].value.copy()
        cfg0 = tiny_config(dsf_epochs=0)
        store, history, _ = pipeline.train_stage2_dsf(cfg0, store, scenes)
        assert history == []
        np.testing.assert_array_equal(store["dsf.l1.w"].value, dsf_before)

    def test_too_short_scenes_rejected(self, tiny_dataset):
        cfg, scenes, _ = tiny_dataset
        long_horizon = tiny_config(t_future=100)
        with pytest.raises(ConfigError, match="eligible"):
            pipeline.train_stage1(long_horizon, scenes)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    cfg = tiny_config(epochs=3)
    data_dir = tmp_path_factory.mktemp("data_inf")
    pipeline.generate_dataset(cfg, data_dir)
    scenes = pipeline.load_dataset(data_dir)
    store, _ = pipeline.train_stage1(cfg, scenes)
    return cfg, scenes, store


@pytest.fixture(scope="module")
def run_artifacts(tmp_path_factory):
    cfg = tiny_config(epochs=3)
    data_dir = tmp_path_factory.mktemp("data_eval")
    pipeline.generate_dataset(cfg, data_dir)
    scenes = pipeline.load_dataset(data_dir)
    store, _ = pipeline.train_stage1(cfg, scenes)
    out = tmp_path_factory.mktemp("run")
    pipeline.run_inference(cfg, store, scenes[0], out_dir=out)
    return cfg, scenes[0], out, data_dir


class TestInference:
    def test_empty_scene_runs_clean(self, trained):
        cfg, scenes, store = trained
        scene = scenes[0]
        empty = type(scene)(frame_rate=scene.frame_rate, frames=scene.frames,
                            detections=[[] for _ in scene.frames],
                            seed=scene.seed, config=scene.config)
        result = pipeline.run_inference(cfg, store, empty)
        assert result["tracks"] == []
        assert result["forecasts"] == []

    def test_forecasts_exist_for_every_pre_association_track(self, trained):
        cfg, scenes, store = trained
        result = pipeline.run_inference(cfg, store, scenes[0])
        k = cfg.samples_per_agent
        by_frame_tracks: dict[int, set] = {}
        for line in result["forecasts"]:
            by_frame_tracks.setdefault(line["frame"], set()).add(line["id"])
        # frame 0 has no tracks yet, so no forecasts
        assert 0 not in by_frame_tracks
        counts: dict[tuple, int] = {}
        for line in result["forecasts"]:
            counts[(line["frame"], line["id"])] = counts.get(
                (line["frame"], line["id"]), 0) + 1
        assert all(v == k for v in counts.values())
        for line in result["forecasts"]:
            assert len(line["trajectory"]) == cfg.t_future

    def test_deterministic_output_files(self, trained, tmp_path):
        cfg, scenes, store = trained
        out_a = tmp_path / "a"
        out_b = tmp_path / "b"
        pipeline.run_inference(cfg, store, scenes[0], out_dir=out_a, seed=1)
        pipeline.run_inference(cfg, store, scenes[0], out_dir=out_b, seed=1)
        for key in ("tracks", "forecasts"):
            assert (out_a / ARTIFACT_NAMES[key]).read_bytes() == \
                   (out_b / ARTIFACT_NAMES[key]).read_bytes()

    def test_random_sampler_deterministic_given_seed(self, trained, tmp_path):
        cfg, scenes, store = trained
        cfg_rand = tiny_config(sampler="random")
        a = pipeline.run_inference(cfg_rand, store, scenes[0], seed=9)
        b = pipeline.run_inference(cfg_rand, store, scenes[0], seed=9)
        assert a["forecasts"] == b["forecasts"]

    def test_corrupted_association_leaves_same_frame_forecasts_identical(
            self, trained):
        cfg, scenes, store = trained
        frame = 6
        clean = pipeline.run_inference(cfg, store, scenes[0], seed=2)
        corrupt = pipeline.run_inference(cfg, store, scenes[0], seed=2,
                                         corrupt_frame=frame)
        clean_now = [l for l in clean["forecasts"] if l["frame"] <= frame]
        corrupt_now = [l for l in corrupt["forecasts"] if l["frame"] <= frame]
        assert clean_now == corrupt_now

    def test_zero_noise_perfect_scene_tracks_perfectly(self, tmp_path_factory):
        # solvable geometry + oracle-grade affinity comes from training on the
        # same scenes; lifecycle must then hold MOTA = 1, IDS = 0
        cfg = tiny_config(epochs=30, frames_per_scene=0, noise={},
                          scene=dict(agents_min=2, agents_max=2,
                                     duration_s=2.0, spawn_extent=20.0,
                                     spawn_separation=12.0),
                          num_scenes=1, use_forecast_head=False)
        data_dir = tmp_path_factory.mktemp("perfect")
        pipeline.generate_dataset(cfg, data_dir)
        scenes = pipeline.load_dataset(data_dir)
        store, _ = pipeline.train_stage1(cfg, scenes)
        report, _ = pipeline.tracking_suite(cfg, store, scenes)
        assert report["mota"] == 1.0
        assert report["ids"] == 0


class TestEvaluate:
    def test_reports_written(self, run_artifacts, tmp_path):
        cfg, scene, out, _ = run_artifacts
        report = pipeline.evaluate_run(
            cfg, scene, out / ARTIFACT_NAMES["tracks"],
            forecasts_path=out / ARTIFACT_NAMES["forecasts"], out_dir=tmp_path)
        assert (tmp_path / "report.json").exists()
        assert (tmp_path / "curves.csv").exists()
        assert 0.0 <= report["mota"] <= 1.0
        assert "forecast" in report
        assert report["forecast"]["ade"] >= 0.0

    def test_gt_as_predictions_scores_perfectly(self, run_artifacts, tmp_path):
        cfg, scene, _, _ = run_artifacts
        tracks = tmp_path / "tracks.jsonl"
        with open(tracks, "w") as fh:
            for f, frame in enumerate(scene.frames):
                for s in frame:
                    fh.write(json.dumps({
                        "frame": f, "id": s.obj_id, "x": s.x, "y": s.y,
                        "z": s.z, "l": s.l, "w": s.w, "h": s.h,
                        "theta": s.theta, "score": 1.0}) + "\n")
        report = pipeline.evaluate_run(cfg, scene, tracks)
        assert report["mota"] == 1.0
        assert report["ids"] == 0
        assert report["samota"] == pytest.approx(1.0)

    def test_missing_forecast_file_gives_mot_only_report(self, run_artifacts,
                                                         tmp_path):
        cfg, scene, out, _ = run_artifacts
        report = pipeline.evaluate_run(
            cfg, scene, out / ARTIFACT_NAMES["tracks"],
            forecasts_path=tmp_path / "absent.jsonl")
        assert "forecast" not in report

    def test_out_of_range_frame_is_explicit_error(self, run_artifacts,
                                                  tmp_path):
        cfg, scene, _, _ = run_artifacts
        tracks = tmp_path / "bad.jsonl"
        tracks.write_text(json.dumps({
            "frame": 999, "id": 1, "x": 0, "y": 0, "z": 0, "l": 4, "w": 2,
            "h": 1.5, "theta": 0, "score": 1.0}) + "\n")
        with pytest.raises(DataError, match="999"):
            pipeline.evaluate_run(cfg, scene, tracks)


class TestSuiteHelpers:
    def test_association_accuracy_bounds(self, tiny_dataset):
        cfg, scenes, _ = tiny_dataset
        store = pipeline.build_model(cfg)
        acc = pipeline.association_accuracy(cfg, store, scenes)
        assert 0.0 <= acc <= 1.0

    def test_forecast_protocol_both_samplers(self, tiny_dataset):
        cfg, scenes, _ = tiny_dataset
        store = pipeline.build_model(cfg)
        for sampler in ("random", "dsf"):
            out = pipeline.forecast_protocol(cfg, store, scenes,
                                             sampler=sampler)
            assert out["ade"] >= 0.0
            assert out["asd"] is not None


class TestCli:
    def test_full_command_round_trip(self, tmp_path):
        config_path = tmp_path / "config.json"
        out = tmp_path / "out"
        config = dict(
            h_past=4, t_future=4, epochs=2, dsf_epochs=1, seed=5,
            samples_per_agent=3, latent_dim=4, frames_per_scene=2,
            scene=dict(agents_min=2, agents_max=2, duration_s=2.0,
                       spawn_extent=20.0, spawn_separation=8.0),
            noise=dict(center_sigma=0.05),
            num_scenes=2, recall_steps=5,
            data_dir=str(tmp_path / "data"),
        )
        config_path.write_text(json.dumps(config))
        base = ["--config", str(config_path), "--out", str(out)]
        assert cli.main(base + ["gen-data"]) == 0
        assert cli.main(base + ["train"]) == 0
        assert (out / "ckpt_stage1.bin").exists()
        assert cli.main(base + ["train-dsf"]) == 0
        ckpt, provenance = ad.load_checkpoint(out / "ckpt_dsf.bin")
        assert provenance == pipeline.checkpoint_sha256(out / "ckpt_stage1.bin")
        scene_path = sorted((tmp_path / "data").glob("*.jsonl"))[0]
        assert cli.main(base + ["run", "--scene", str(scene_path)]) == 0
        assert (out / "tracks.jsonl").exists()
        assert cli.main(base + ["evaluate", "--scene", str(scene_path)]) == 0
        assert (out / "report.json").exists()
        assert (out / "curves.csv").exists()
        assert cli.main(base + ["export-plot"]) == 0
        assert (out / "curves.png").exists()

    def test_usage_error_exit_code(self, capsys):
        assert cli.main(["definitely-not-a-command"]) == 1

    def test_missing_data_exit_code(self, tmp_path):
        out = tmp_path / "out"
        code = cli.main(["--out", str(out), "evaluate",
                         "--scene", str(tmp_path / "missing.jsonl")])
        assert code == 2

    def test_unknown_config_key_exit_code(self, tmp_path):
        config_path = tmp_path / "config.json"
        config_path.write_text(json.dumps({"no_such_knob": 1}))
        code = cli.main(["--config", str(config_path), "gen-data"])
        assert code == 1
