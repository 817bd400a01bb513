import contextlib
import io
import json
import os
import sys
import tempfile
import unittest
from pathlib import Path
from unittest import mock

# Add app to path
sys.path.append(os.getcwd())

from app.config import RunConfig, env_values, resolve_run_config
from app.main import EXIT_FAILURE, EXIT_OK, EXIT_USAGE, main
from app.models import InvalidArgumentError, Scale
from app.services import dataset


def run_quietly(argv):
    out, err = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        code = main(argv)
    return code, out.getvalue()


class TestRunConfig(unittest.TestCase):
    def test_precedence(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "run.json"
            path.write_text(json.dumps({"seed": 1, "jobs": 2, "data": "from_file"}))
            cfg = resolve_run_config("gen", {"seed": None, "jobs": 3}, str(path), environ={"SDN_SEED": "5"})
        self.assertEqual(cfg.seed, 5)
        self.assertEqual(cfg.jobs, 3)
        self.assertEqual(cfg.data, "from_file")

    def test_env_values(self):
        values = env_values({"SDN_MECHANISM": "lca", "SDN_OUT": "", "OTHER": "x"})
        self.assertEqual(values, {"mechanism": "lca"})

    def test_parsing(self):
        cfg = RunConfig(command="attn", query="12,30", windows="9,5,1")
        self.assertEqual(cfg.query, [12, 30])
        self.assertEqual(cfg.windows, {16: 9, 8: 5, 4: 1})
        self.assertEqual(RunConfig(command="eval", unseen_parts="front_bracket, pulley,wheel_4").unseen_parts,
                         ["front_bracket", "pulley", "wheel_4"])
        self.assertEqual(RunConfig(command="gen", max_nqd=0.2, diff_max=4).gen_overrides(),
                         {"max_nqd": 0.2, "d_max": 4})

    def test_invalid_values(self):
        for bad in ({"seed": -1}, {"seed": 2 ** 64}, {"jobs": 0}, {"level": 3}, {"mechanism": "conv"},
                    {"query": "1,2,3"}):
            with self.assertRaises(ValueError, msg=str(bad)):
                RunConfig(command="x", **bad)

    def test_require_file(self):
        with self.assertRaises(InvalidArgumentError):
            RunConfig(command="eval").require_file("checkpoint")
        with self.assertRaises(FileNotFoundError) as ctx:
            RunConfig(command="eval", checkpoint="missing/best.ckpt").require_file("checkpoint")
        self.assertIn("missing/best.ckpt", str(ctx.exception))

    def test_missing_config_file(self):
        with self.assertRaises(FileNotFoundError):
            resolve_run_config("gen", {}, "does/not/exist.json", environ={})


class TestCommands(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name)
        self.env = mock.patch.dict(os.environ, {}, clear=False)
        self.env.start()
        for name in list(os.environ):
            if name.startswith("SDN_"):
                del os.environ[name]
        self.counts = mock.patch.dict(dataset.SUITE_COUNTS, {Scale.TINY: (4, 3)})
        self.counts.start()

    def tearDown(self):
        self.counts.stop()
        self.env.stop()
        self.tmp.cleanup()

    def test_gen_is_reproducible(self):
        for name in ("a", "b"):
            code, _ = run_quietly(["gen", "--out", str(self.root / name), "--seed", "3", "--split", "test_seen_pose"])
            self.assertEqual(code, EXIT_OK)
        manifest = Path("test_seen_pose") / dataset.MANIFEST_NAME
        self.assertEqual((self.root / "a" / manifest).read_bytes(), (self.root / "b" / manifest).read_bytes())

    def test_missing_checkpoint(self):
        missing = self.root / "runs" / "best.ckpt"
        with self.assertLogs("app", level="ERROR") as logs:
            code, _ = run_quietly(["eval", "--checkpoint", str(missing), "--data", str(self.root)])
        self.assertEqual(code, EXIT_FAILURE)
        self.assertIn(str(missing), "\n".join(logs.output))

    def test_usage_errors(self):
        self.assertEqual(run_quietly(["gen", "--bogus"])[0], EXIT_USAGE)
        self.assertEqual(run_quietly(["frobnicate"])[0], EXIT_USAGE)
        self.assertEqual(run_quietly(["gen", "--seed", "-4"])[0], EXIT_USAGE)
        self.assertEqual(run_quietly(["gen", "--out", str(self.root), "--split", "nope"])[0], EXIT_USAGE)

    def test_eval_and_attn_take_no_seed(self):
        self.assertEqual(run_quietly(["eval", "--checkpoint", "x.ckpt", "--seed", "3"])[0], EXIT_USAGE)
        self.assertEqual(run_quietly(["attn", "--checkpoint", "x.ckpt", "--query", "1,1", "--seed", "3"])[0],
                         EXIT_USAGE)

    def test_attn_needs_query(self):
        self.assertEqual(run_quietly(["attn", "--checkpoint", "x.ckpt"])[0], EXIT_USAGE)

    def test_gradcheck(self):
        code, out = run_quietly(["gradcheck"])
        self.assertEqual(code, EXIT_OK)
        self.assertIn("local_cross_attention", out)

    def test_oracle_suite(self):
        code, out = run_quietly(["oracle", "--suite", "nqd", "--suite", "lca_window_one"])
        self.assertEqual(code, EXIT_OK)
        self.assertIn("lca_window_one", out)

    def test_gen_train_eval_attn(self):
        data = self.root / "data"
        run = self.root / "run"
        self.assertEqual(run_quietly(["gen", "--data", str(data), "--seed", "1"])[0], EXIT_OK)
        code, _ = run_quietly(["train", "--data", str(data), "--out", str(run), "--mechanism", "lca",
                               "--windows", "5,3,3", "--epochs", "2", "--max-steps", "1", "--seed", "1"])
        self.assertEqual(code, EXIT_OK)
        checkpoint = run / "best.ckpt"
        self.assertTrue(checkpoint.is_file())

        report_dir = self.root / "report"
        code, out = run_quietly(["eval", "--data", str(data), "--checkpoint", str(checkpoint),
                                 "--out", str(report_dir)])
        self.assertEqual(code, EXIT_OK)
        self.assertIn("3 pairs", out)
        for name in ("rows.csv", "aggregates.csv", "boxplot.svg", "report.pdf"):
            self.assertTrue((report_dir / name).is_file(), name)

        ablation_dir = self.root / "ablation_report"
        code, _ = run_quietly(["eval", "--data", str(data), "--checkpoint", str(checkpoint), "--out", str(ablation_dir),
                               "--unseen-parts", "front_bracket,pulley,wheel_4"])
        self.assertEqual(code, EXIT_OK)
        strata = {line.split(",")[0] for line in (ablation_dir / "aggregates.csv").read_text().splitlines()}
        self.assertTrue({"unseen_parts", "seen_parts"} <= strata)
        code, _ = run_quietly(["eval", "--data", str(data), "--checkpoint", str(checkpoint), "--out", str(ablation_dir),
                               "--unseen-parts", "flux_capacitor"])
        self.assertEqual(code, EXIT_USAGE)

        code, _ = run_quietly(["attn", "--data", str(data), "--checkpoint", str(checkpoint), "--query", "32,32",
                               "--level", "1", "--out", str(report_dir)])
        self.assertEqual(code, EXIT_OK)
        self.assertTrue(list(report_dir.glob("attention_pair00000000_l1_32_32.*")))


if __name__ == "__main__":
    unittest.main()
