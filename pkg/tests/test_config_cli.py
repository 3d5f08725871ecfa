import pytest

from askd.backbone import BackboneConfig
from askd.config import SCHEMA, parse_config
from askd.errors import ConfigError
from askd.cli import main


class TestParseConfig:
    def test_empty_file_gives_documented_defaults(self, tmp_path):
        cfg_file = tmp_path / "empty.cfg"
        cfg_file.write_text("")
        cfg = parse_config(cfg_file)
        assert cfg["ratio"] == 4
        assert cfg["epochs"] == 20
        assert cfg["batch_size"] == 128
        assert cfg["base_lr"] == 0.1
        assert cfg["lr_decay_epochs"] == (6, 11, 15, 17)
        assert cfg["lr_decay_factor"] == 0.1
        assert cfg["scale_s"] == 64.0
        assert cfg["margin_m"] == 0.5
        assert cfg["lambda_distill"] == 5.0
        assert cfg["kd_temperature"] == 4.0
        assert cfg["attention_site_policy"] == "all_eligible_convs"
        assert cfg["embedding_dim"] == 512

    def test_no_file_gives_defaults_too(self):
        cfg = parse_config(None)
        assert cfg["epochs"] == 20

    def test_override_wins_over_file(self, tmp_path):
        cfg_file = tmp_path / "c.cfg"
        cfg_file.write_text("lambda_distill = 5\n")
        cfg = parse_config(cfg_file, overrides=["lambda_distill=0"])
        assert cfg["lambda_distill"] == 0.0

    def test_typo_key_rejected_by_name(self, tmp_path):
        cfg_file = tmp_path / "c.cfg"
        cfg_file.write_text("lamda_distill = 5\n")
        with pytest.raises(ConfigError, match="lamda_distill"):
            parse_config(cfg_file)

    def test_type_mismatch_rejected_by_name(self, tmp_path):
        cfg_file = tmp_path / "c.cfg"
        cfg_file.write_text("epochs = soon\n")
        with pytest.raises(ConfigError, match="epochs"):
            parse_config(cfg_file)

    def test_comments_and_blank_lines_ignored(self, tmp_path):
        cfg_file = tmp_path / "c.cfg"
        cfg_file.write_text("# a comment\n\nratio = 2  # trailing comment\n")
        assert parse_config(cfg_file)["ratio"] == 2

    def test_cross_schema_validation_runs_upfront(self, tmp_path):
        cfg_file = tmp_path / "c.cfg"
        cfg_file.write_text("margin_m = 3.0\n")  # outside [0, pi/2)
        with pytest.raises(ConfigError):
            parse_config(cfg_file)

    def test_env_seed_is_last_resort(self, tmp_path, monkeypatch):
        monkeypatch.setenv("ASKD_SEED", "777")
        cfg = parse_config(None)
        assert cfg["seed"] == 777
        assert cfg.seed_from_env
        cfg = parse_config(None, overrides=["seed=3"])
        assert cfg["seed"] == 3

    def test_builders_produce_module_configs(self):
        cfg = parse_config(None, overrides=[
            "stage_widths=24,48", "blocks_per_stage=2,2", "embedding_dim=64", "input_size=32",
        ])
        assert cfg.backbone_config() == BackboneConfig.toy()
        assert cfg.train_config(student=True).distill.lambda_distill == 5.0
        assert cfg.train_config(student=False).distill is None

    def test_echo_covers_every_key(self):
        cfg = parse_config(None)
        lines = cfg.echo_lines()
        keys = {line.split(" = ")[0] for line in lines if " = " in line}
        assert keys == set(SCHEMA)


TOY_OVERRIDES = [
    "stage_widths=16,32",
    "blocks_per_stage=1,1",
    "embedding_dim=32",
    "input_size=32",
    "epochs=2",
    "batch_size=16",
    "base_lr=0.02",
    "lr_decay_epochs=1",
    "scale_s=8",
    "margin_m=0.2",
]


def _toy_args(extra):
    args = list(extra)
    for o in TOY_OVERRIDES:
        args += ["--set", o]
    return args


@pytest.fixture(scope="module")
def cli_degraded(tmp_path_factory):
    """Run the degrade subcommand once for the CLI tests."""
    from askd.synthetic import generate_corpus

    base = tmp_path_factory.mktemp("cli")
    root = base / "faces"
    generate_corpus(root, n_identities=3, images_per_identity=4, size=32, seed=2)
    out = base / "degraded"
    code = main(["degrade", "--root", str(root), "--out", str(out), "--ratio", "4", "--sigma", "1.0"])
    assert code == 0
    return {"root": root, "out": out, "manifest": out / "manifest.tsv", "base": base}


class TestCli:
    def test_degrade_outputs(self, cli_degraded):
        out = cli_degraded["out"]
        assert (out / "manifest.tsv").is_file()
        assert (out / "MANIFEST.txt").is_file()
        assert (out / "config.txt").is_file()
        listed = (out / "MANIFEST.txt").read_text().splitlines()
        assert "manifest.tsv" in listed and "config.txt" in listed
        echo = (out / "config.txt").read_text()
        assert "ratio = 4" in echo and "blur_sigma = 1.0" in echo

    def test_rerun_refused_without_force(self, cli_degraded):
        code = main([
            "degrade", "--root", str(cli_degraded["root"]), "--out", str(cli_degraded["out"]),
        ])
        assert code == 1

    def test_rerun_allowed_with_force(self, cli_degraded):
        code = main([
            "degrade", "--root", str(cli_degraded["root"]), "--out", str(cli_degraded["out"]),
            "--ratio", "4", "--sigma", "1.0", "--force",
        ])
        assert code == 0

    def test_unknown_key_exits_one(self, cli_degraded, capsys):
        code = main(["degrade", "--root", str(cli_degraded["root"]),
                     "--out", str(cli_degraded["base"] / "x"), "--set", "lamda=1"])
        assert code == 1
        err = capsys.readouterr().err
        assert "lamda" in err and err.count("\n") == 1  # single-line diagnostic

    def test_missing_manifest_exits_two(self, cli_degraded):
        code = main(_toy_args([
            "train-teacher", "--manifest", str(cli_degraded["base"] / "missing.tsv"),
            "--out", str(cli_degraded["base"] / "tt"),
        ]))
        assert code == 2

    def test_missing_required_flag_exits_one(self, cli_degraded):
        code = main(["train-teacher", "--out", str(cli_degraded["base"] / "yy")])
        assert code == 1

    def test_bad_subcommand_usage_exits_one(self):
        assert main(["frobnicate"]) == 1

    def test_train_and_student_and_reports(self, cli_degraded):
        base = cli_degraded["base"]
        manifest = str(cli_degraded["manifest"])
        code = main(_toy_args([
            "train-teacher", "--manifest", manifest, "--out", str(base / "teacher"),
        ]))
        assert code == 0
        teacher = base / "teacher" / "teacher.ckpt"
        assert teacher.is_file()
        assert (base / "teacher" / "train_log.jsonl").is_file()
        assert (base / "teacher" / "loss_curve.png").is_file()

        code = main(_toy_args([
            "train-student", "--manifest", manifest, "--teacher", str(teacher),
            "--out", str(base / "student"), "--set", "lambda_distill=2.0",
        ]))
        assert code == 0
        student = base / "student" / "student.ckpt"
        assert student.is_file()

        code = main(_toy_args([
            "analyze", "--teacher", str(teacher), "--student", str(student),
            "--manifest", manifest, "--out", str(base / "ana"), "--overlay-count", "1",
        ]))
        assert code == 0
        assert (base / "ana" / "correlation.kv").is_file()
        assert (base / "ana" / "correlation_bars.png").is_file()
        overlays = list((base / "ana" / "overlays").glob("*.png"))
        assert overlays

    def test_config_echo_roundtrip_reproduces_run(self, cli_degraded, tmp_path):
        # rerunning from the echoed config must reproduce the deterministic
        # run content: parameter tensors and the per-step loss sequence
        from askd.checkpoint import Checkpoint, state_dict_hash
        from askd.trainer import read_train_log

        base = cli_degraded["base"]
        manifest = str(cli_degraded["manifest"])
        first = tmp_path / "first"
        assert main(_toy_args([
            "train-teacher", "--manifest", manifest, "--out", str(first), "--seed", "5",
        ])) == 0
        echoed = first / "config.txt"
        second = tmp_path / "second"
        assert main([
            "train-teacher", "--config", str(echoed), "--manifest", manifest, "--out", str(second),
        ]) == 0
        a = Checkpoint.load(first / "teacher.ckpt")
        b = Checkpoint.load(second / "teacher.ckpt")
        assert a.backbone_hash() == b.backbone_hash()
        assert state_dict_hash(a.head_state) == state_dict_hash(b.head_state)
        key = lambda recs: [(r.epoch, r.step, r.lr, r.total_loss) for r in recs]
        assert key(read_train_log(first / "train_log.jsonl")) == key(
            read_train_log(second / "train_log.jsonl")
        )

    def test_single_identity_data_error_exit_code(self, tmp_path):
        from askd.synthetic import generate_corpus

        root = tmp_path / "single"
        generate_corpus(root, n_identities=1, images_per_identity=3, size=32, seed=0)
        out = tmp_path / "deg"
        assert main(["degrade", "--root", str(root), "--out", str(out), "--ratio", "2"]) == 0
        code = main(_toy_args([
            "train-teacher", "--manifest", str(out / "manifest.tsv"), "--out", str(tmp_path / "t"),
        ]))
        assert code == 3  # training precondition failure
