import io
import json
import sys
import tempfile
import unittest
from contextlib import redirect_stdout
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from gradual_cam.autonet import load_model, predict_proba  # noqa: E402
from gradual_cam.cli import build_parser, main  # noqa: E402
from gradual_cam.trainer import LabeledImage, export_dataset, import_dataset  # noqa: E402
from gradual_cam.util import read_matrix_csv  # noqa: E402


def run(argv):
    buffer = io.StringIO()
    with redirect_stdout(buffer):
        code = main(argv)
    return code, buffer.getvalue()


def outputs_in(directory: Path):
    """Entry names in ``directory``, ignoring the run log folder."""
    return sorted(path.name for path in directory.iterdir() if path.name != ".gradual-cam")


class CliTests(unittest.TestCase):
    @classmethod
    def setUpClass(cls) -> None:
        cls._tmp = tempfile.TemporaryDirectory()
        cls.root = Path(cls._tmp.name)
        cls.config = str(cls.root / "config.json")
        cls.model_path = cls.root / "net-a.weights"
        code, cls.train_output = run([
            "train", "--config", cls.config, "--out", str(cls.model_path), "--seed", "1",
            "--epochs", "1", "--train-count", "6", "--test-count", "3", "--batch-size", "3",
        ])
        assert code == 0, cls.train_output
        cls.data_dir = cls.root / "data"
        code, cls.dataset_output = run([
            "dataset", "--seed", "9", "--count", "6", "--out", str(cls.data_dir),
        ])
        assert code == 0, cls.dataset_output

    @classmethod
    def tearDownClass(cls) -> None:
        cls._tmp.cleanup()

    def test_train_outputs(self) -> None:
        self.assertTrue(self.model_path.exists())
        self.assertIn("Accuracy: test", self.train_output)
        report_path = self.root / "net-a.weights.report.json"
        report = json.loads(report_path.read_text(encoding="utf-8"))
        self.assertEqual(report["config"]["train_count"], 6)
        self.assertEqual(load_model(self.model_path).name, "net-a")
        log_lines = (self.root / ".gradual-cam" / "runs.jsonl").read_text(encoding="utf-8")
        self.assertIn('"train.done"', log_lines)

    def test_train_rerun_is_bitwise_identical(self) -> None:
        again = self.root / "again" / "net-a.weights"
        code, text = run([
            "train", "--config", self.config, "--out", str(again), "--seed", "1",
            "--epochs", "1", "--train-count", "6", "--test-count", "3", "--batch-size", "3",
        ])
        self.assertEqual(code, 0, text)
        self.assertEqual(again.read_bytes(), self.model_path.read_bytes())

    def test_failed_train_leaves_no_outputs(self) -> None:
        out_dir = self.root / "train-blocked"
        (out_dir / "m.weights.report.json").mkdir(parents=True)
        code, _ = run([
            "train", "--config", self.config, "--out", str(out_dir / "m.weights"), "--seed", "1",
            "--epochs", "1", "--train-count", "6", "--test-count", "3", "--batch-size", "3",
        ])
        self.assertEqual(code, 1)
        self.assertEqual(outputs_in(out_dir), ["m.weights.report.json"])

    def test_dataset_outputs(self) -> None:
        lines = (self.data_dir / "labels.csv").read_text(encoding="utf-8").splitlines()
        self.assertEqual(len(lines), 7)
        self.assertTrue((self.data_dir / "img-00005.pgm").exists())
        self.assertIn("Wrote 6 image(s)", self.dataset_output)

    def test_explain_gradual_writes_stages(self) -> None:
        image = str(self.data_dir / "img-00000.pgm")
        outputs = []
        for name in ("a", "b"):
            out_dir = self.root / f"explain-{name}"
            code, text = run([
                "explain", "--config", self.config, "--model", str(self.model_path),
                "--image", image, "--method", "gradcam", "--gradual", "--out", str(out_dir),
            ])
            self.assertEqual(code, 0, text)
            outputs.append(out_dir)
        first, second = outputs
        for name in ("saliency.csv", "base.csv", "overlay.ppm", "significant.pgm",
                     "stage-1.csv", "stage-2.csv"):
            self.assertEqual((first / name).read_bytes(), (second / name).read_bytes(), name)
        self.assertFalse((first / "stage-3.csv").exists())
        self.assertEqual(read_matrix_csv(first / "saliency.csv").shape, (32, 32))
        self.assertEqual(read_matrix_csv(first / "base.csv").shape, (8, 8))
        self.assertIn("Stages: 2", text)
        self.assertIn("Predicted:", text)

    def test_explain_bilinear_has_no_stages(self) -> None:
        out_dir = self.root / "explain-ebp"
        code, text = run([
            "explain", "--config", self.config, "--model", str(self.model_path),
            "--image", str(self.data_dir / "img-00001.pgm"), "--method", "ebp",
            "--out", str(out_dir),
        ])
        self.assertEqual(code, 0, text)
        self.assertFalse((out_dir / "stage-1.csv").exists())
        self.assertNotIn("Stages:", text)

    def test_explain_without_gradual_removes_old_stages(self) -> None:
        out_dir = self.root / "explain-reused"
        image = str(self.data_dir / "img-00002.pgm")
        for extra in (["--gradual"], []):
            code, text = run([
                "explain", "--config", self.config, "--model", str(self.model_path),
                "--image", image, "--out", str(out_dir),
            ] + extra)
            self.assertEqual(code, 0, text)
        self.assertEqual(
            outputs_in(out_dir), ["base.csv", "overlay.ppm", "saliency.csv", "significant.pgm"]
        )

    def test_failed_explain_leaves_no_outputs(self) -> None:
        out_dir = self.root / "explain-blocked"
        (out_dir / "overlay.ppm").mkdir(parents=True)
        code, _ = run([
            "explain", "--config", self.config, "--model", str(self.model_path),
            "--image", str(self.data_dir / "img-00000.pgm"), "--gradual", "--out", str(out_dir),
        ])
        self.assertEqual(code, 1)
        self.assertEqual(outputs_in(out_dir), ["overlay.ppm"])

    def test_explain_missing_image(self) -> None:
        code, _ = run([
            "explain", "--config", self.config, "--model", str(self.model_path),
            "--image", str(self.root / "missing.pgm"), "--out", str(self.root / "x"),
        ])
        self.assertEqual(code, 1)

    def test_evaluate_empty_cohort(self) -> None:
        code, text = run([
            "evaluate", "--config", self.config, "--model", str(self.model_path),
            "--data", str(self.data_dir), "--out", str(self.root / "eval-empty"),
            "--min-confidence", "1.0", "--runs", "2", "--warmup", "0",
        ])
        self.assertEqual(code, 3)
        self.assertIn("Empty cohort", text)

    def _agreed_data(self, name: str) -> Path:
        """The exported dataset relabelled with the model's own predictions."""
        model = load_model(self.model_path)
        dataset = import_dataset(self.data_dir)
        images = np.stack([item.image for item in dataset])
        predicted = predict_proba(model, images).argmax(axis=1)
        agreed = self.root / name
        export_dataset([LabeledImage(item.image, int(p)) for item, p in zip(dataset, predicted)],
                       agreed)
        return agreed

    def test_evaluate_writes_report(self) -> None:
        agreed = self._agreed_data("data-agreed")
        out_dir = self.root / "eval"
        code, text = run([
            "evaluate", "--config", self.config, "--model", str(self.model_path),
            "--data", str(agreed), "--out", str(out_dir), "--min-confidence", "0",
            "--runs", "2", "--warmup", "0", "--steps", "16",
        ])
        self.assertEqual(code, 0, text)
        report = (out_dir / "report.txt").read_text(encoding="utf-8")
        self.assertIn("images = 6", report)
        self.assertIn("[method gradcam-bilinear]", report)
        self.assertIn("[method gradcam-gradual]", report)
        self.assertIn("[compare gradcam]", report)
        curve = (out_dir / "curve-gradcam-gradual.csv").read_text(encoding="utf-8").splitlines()
        self.assertEqual(curve[0], "fraction,score")
        self.assertEqual(len(curve), 18)
        self.assertIn("gradcam: dAUC", text)

    def test_failed_evaluate_leaves_no_outputs(self) -> None:
        out_dir = self.root / "eval-blocked"
        (out_dir / "curve-gradcam-gradual.csv").mkdir(parents=True)
        agreed = self._agreed_data("data-agreed-blocked")
        code, _ = run([
            "evaluate", "--config", self.config, "--model", str(self.model_path),
            "--data", str(agreed), "--out", str(out_dir), "--min-confidence", "0",
            "--runs", "2", "--warmup", "0", "--steps", "16",
        ])
        self.assertEqual(code, 1)
        self.assertEqual(outputs_in(out_dir), ["curve-gradcam-gradual.csv"])

    def test_config_command(self) -> None:
        code, text = run(["config", "--config", self.config])
        self.assertEqual(code, 0)
        self.assertIn("steps: 64", text)


class ParserTests(unittest.TestCase):
    def test_missing_required_flag(self) -> None:
        with self.assertRaises(SystemExit) as ctx, redirect_stdout(io.StringIO()):
            build_parser().parse_args(["train"])
        self.assertEqual(ctx.exception.code, 2)

    def test_out_of_range_values(self) -> None:
        bad = [
            ["evaluate", "--model", "m", "--data", "d", "--out", "o", "--min-confidence", "1.01"],
            ["evaluate", "--model", "m", "--data", "d", "--out", "o", "--threshold", "1"],
            ["evaluate", "--model", "m", "--data", "d", "--out", "o", "--methods", "lime"],
            ["explain", "--model", "m", "--image", "i", "--out", "o", "--blend", "-0.1"],
        ]
        for argv in bad:
            with self.assertRaises(SystemExit) as ctx:
                build_parser().parse_args(argv)
            self.assertEqual(ctx.exception.code, 2, argv)

    def test_defaults(self) -> None:
        args = build_parser().parse_args(["evaluate", "--model", "m", "--data", "d", "--out", "o"])
        self.assertEqual(args.methods, ["gradcam-bilinear", "gradcam-gradual"])
        self.assertIsNone(args.steps)


if __name__ == "__main__":
    unittest.main()
