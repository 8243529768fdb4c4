import numpy as np
import pytest

from osrkit import data as D
from osrkit import evaluate as E
from osrkit import glyphs
from osrkit import model as M
from osrkit import openset as O
from osrkit import train as TR
from osrkit.checkpoint import Checkpoint
from osrkit.errors import ProtocolError


def scored(scores, tags):
    return [E.ScoredExample(score=float(s), is_unknown=(t == "u"), predicted=0,
                            original_label=0)
            for s, t in zip(scores, tags)]


def pairwise_auroc(examples):
    """O(n^2) oracle: count known < unknown pairs, ties worth half."""
    known = [e.score for e in examples if not e.is_unknown]
    unknown = [e.score for e in examples if e.is_unknown]
    total = 0.0
    for k in known:
        for u in unknown:
            if k < u:
                total += 1.0
            elif k == u:
                total += 0.5
    return total / (len(known) * len(unknown))


class TestTop1Accuracy:
    def test_all_correct(self):
        assert E.top1_accuracy([1, 2, 3], [1, 2, 3]) == 1.0

    def test_all_wrong(self):
        assert E.top1_accuracy([0, 1], [1, 0]) == 0.0

    def test_three_of_four(self):
        assert E.top1_accuracy([0, 1, 2, 3], [0, 1, 2, 0]) == 0.75

    def test_empty_rejected(self):
        with pytest.raises(ProtocolError):
            E.top1_accuracy([], [])


class TestAuroc:
    def test_perfect_separation(self):
        assert E.auroc(scored([0.1, 0.2, 0.3, 0.4], "kkuu")) == 1.0

    def test_interleaved(self):
        # pairs (1,2) yes, (1,4) yes, (3,2) no, (3,4) yes -> 3/4
        assert E.auroc(scored([1, 3, 2, 4], "kkuu")) == 0.75

    def test_all_ties(self):
        assert E.auroc(scored([5, 5, 5, 5], "kkuu")) == 0.5

    def test_single_population_rejected(self):
        with pytest.raises(ProtocolError):
            E.auroc(scored([1, 2], "kk"))

    def test_non_finite_score_rejected(self):
        with pytest.raises(ProtocolError):
            scored([np.nan, 1.0], "ku")

    def test_matches_pairwise_oracle_with_ties(self, rng):
        for _ in range(40):
            n = int(rng.integers(2, 120))
            values = rng.choice([0.0, 0.25, 0.5, 1.0, 2.0, 3.5], size=n)
            tags = rng.choice(list("ku"), size=n)
            if len(set(tags)) < 2:
                tags[0], tags[1] = "k", "u"
            examples = scored(values, tags)
            assert E.auroc(examples) == pytest.approx(pairwise_auroc(examples), abs=0)

    def test_invariant_under_increasing_transforms(self, rng):
        values = rng.normal(size=60)
        tags = ["k"] * 30 + ["u"] * 30
        base = E.auroc(scored(values, tags))
        assert E.auroc(scored(np.exp(values), tags)) == pytest.approx(base, abs=0)
        assert E.auroc(scored(3.0 * values + 11.0, tags)) == pytest.approx(base, abs=0)

    def test_negation_with_swapped_tags_is_symmetric(self, rng):
        values = rng.normal(size=50)
        tags = list(rng.choice(list("ku"), size=50))
        tags[0], tags[1] = "k", "u"
        flipped = ["u" if t == "k" else "k" for t in tags]
        assert E.auroc(scored(-values, flipped)) == pytest.approx(
            E.auroc(scored(values, tags)), abs=1e-15)


class TestAggregate:
    def make_trial(self, seed, acc, score, space="detection"):
        return E.TrialReport(dataset="glyphs", protocol="six-four", split_seed=seed,
                             space=space, accuracy=acc, auroc=score,
                             n_known_test=10, n_unknown_test=5)

    def test_identical_trials(self):
        trials = [self.make_trial(s, 0.9, 0.8) for s in range(3)]
        agg = E.aggregate(trials)
        assert agg.mean_accuracy == 0.9 and agg.mean_auroc == 0.8
        assert agg.std_accuracy == 0.0 and agg.std_auroc == 0.0

    def test_mean_of_two(self):
        agg = E.aggregate([self.make_trial(0, 1.0, 0.9), self.make_trial(1, 0.8, 1.0)])
        assert agg.mean_auroc == pytest.approx(0.95)
        assert agg.mean_accuracy == pytest.approx(0.9)

    def test_mixed_protocols_rejected(self):
        a = self.make_trial(0, 1.0, 1.0)
        b = E.TrialReport(dataset="glyphs", protocol="tiny-imagenet-20", split_seed=1,
                          space="detection", accuracy=1.0, auroc=1.0,
                          n_known_test=1, n_unknown_test=1)
        with pytest.raises(ProtocolError):
            E.aggregate([a, b])

    def test_emitters(self):
        agg = E.aggregate([self.make_trial(0, 0.987654, 0.91234)])
        table = E.format_table(agg)
        assert "98.8" in table and "91.2" in table
        tsv = E.reports_tsv(agg)
        assert "0.987654" in tsv and tsv.startswith("row\tseed")


@pytest.fixture(scope="module")
def trial_artifacts():
    """A tiny but genuinely trained pipeline shared by trial-level tests."""
    cfg = M.ModelConfig(28, 28, 1, 14, 16, 1, 2, 6)
    corpus_train = glyphs.make_glyph_set(per_class=24, seed=5)
    corpus_test = glyphs.make_glyph_set(per_class=10, seed=6)
    split = D.make_split("glyphs", "six-four", seed=0)
    config = TR.TrainConfig(batch_size=32, max_epochs=4, seed=0,
                            steps_per_stage=10_000, learning_rate=0.02)
    stream = D.TrainStream(corpus_train, split, config.batch_size, config.seed)
    vit = M.init_vit(cfg, seed=11, dtype=config.dtype)
    TR.train_stage1(vit, cfg, stream, config)
    head = O.init_detection_head(cfg, seed=12, dtype=config.dtype)
    features, labels = TR.extract_training_features(stream, vit, cfg)
    centers = O.anchor_centers_from_features(features, labels, head, cfg.num_classes)
    TR.train_stage2(vit, cfg, head, centers, stream, config,
                    features=features, labels=labels)
    ckpt = Checkpoint(config=cfg, vit=vit, head=head, centers=centers, init_seed=11,
                      head_seed=12, norm_stats=stream.stats, stage="final")
    bundle = D.DatasetBundle(train=corpus_train, test=corpus_test)
    return bundle, split, ckpt


class TestRunTrial:
    def test_counts_and_ranges(self, trial_artifacts):
        bundle, split, ckpt = trial_artifacts
        report = E.run_trial(bundle, split, ckpt)
        assert report.n_known_test + report.n_unknown_test == len(bundle.test)
        assert 0.0 <= report.accuracy <= 1.0
        assert 0.0 <= report.auroc <= 1.0
        assert report.space == "detection"

    def test_deterministic(self, trial_artifacts):
        bundle, split, ckpt = trial_artifacts
        assert E.run_trial(bundle, split, ckpt) == E.run_trial(bundle, split, ckpt)

    def test_all_three_spaces_run(self, trial_artifacts):
        bundle, split, ckpt = trial_artifacts
        for space in E.SPACES:
            report = E.run_trial(bundle, split, ckpt, space=space)
            assert report.space == space

    def test_k_mismatch_rejected(self, trial_artifacts):
        bundle, _, ckpt = trial_artifacts
        other = D.make_split("glyphs", "cifar-plus-10", seed=0)
        with pytest.raises(ProtocolError):
            E.run_trial(bundle, other, ckpt)

    def test_report_json_round_trip(self, trial_artifacts, tmp_path):
        bundle, split, ckpt = trial_artifacts
        report = E.run_trial(bundle, split, ckpt)
        E.save_report(report, tmp_path / "r.json", tau=1.25)
        assert E.load_report(tmp_path / "r.json") == report


class TestExportEmbeddings:
    def test_row_count_and_width(self, trial_artifacts, tmp_path):
        bundle, split, ckpt = trial_artifacts
        out = tmp_path / "emb.tsv"
        rows = E.export_embeddings(bundle, split, ckpt, "detection", out,
                                   n_known=20, n_unknown=10, seed=3)
        lines = out.read_text().strip().split("\n")
        assert rows == 30 and len(lines) == 31
        width = len(lines[0].split("\t"))
        assert width == ckpt.config.embed_dim + 4

    def test_reexport_identical(self, trial_artifacts, tmp_path):
        bundle, split, ckpt = trial_artifacts
        a, b = tmp_path / "a.tsv", tmp_path / "b.tsv"
        E.export_embeddings(bundle, split, ckpt, "feature", a, 8, 4, seed=9)
        E.export_embeddings(bundle, split, ckpt, "feature", b, 8, 4, seed=9)
        assert a.read_bytes() == b.read_bytes()
