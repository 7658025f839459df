"""Loss ablations on the synthetic set: face supervision, references, identity-only"""

import math

import pytest

from src.restoration.curation import DataConfig, curate, materialize_lq
from src.restoration.degrade import DegradeConfig
from src.restoration.evaluate import EvalConfig, evaluate_manifest, model_restorer
from src.restoration.identity import ToyEmbedder
from src.restoration.losses import FaceLossWeights, ObjectiveWeights
from src.restoration.model import ModelConfig, load_checkpoint
from src.restoration.synth import generate_dataset
from src.restoration.train import TrainConfig, run_training

pytestmark = pytest.mark.slow

SEED = 3
FACE_SIDE = 64

DATA = DataConfig(
    size=64,
    num_portraits=24,
    scenes_per_identity=3,
    num_faces=4,
    num_scenes=4,
    face_side=FACE_SIDE,
    test_fraction=0.25,
)

MODEL = ModelConfig(
    encoder_width=16,
    unet_widths=[16, 32],
    context_dim=8,
    disc_width=8,
    ae_steps=150,
    prior_steps=100,
)

VARIANTS = {
    "no_face": (ObjectiveWeights(lambda_F=0.0), FaceLossWeights()),
    "full": (ObjectiveWeights(), FaceLossWeights()),
    "id_only": (
        ObjectiveWeights(lambda_P=0.0),
        FaceLossWeights(lambda_fid=0.0, lambda_lpips=0.0, lambda_adv=0.0),
    ),
}


@pytest.fixture(scope="module")
def ablation(tmp_path_factory):
    """(variant, with_reference) -> evaluation report on the held-out test manifest"""
    root = tmp_path_factory.mktemp("ablation")
    data = root / "data"
    embedder = ToyEmbedder()
    records = generate_dataset(data, DATA, seed=SEED)
    result = curate(records, data, DATA, DegradeConfig(), embedder, seed=SEED)
    materialize_lq(result.train + result.test, data, DegradeConfig())
    assert result.test and any(t.ref is not None for t in result.test)

    reports = {}
    for name, (objective, weights) in VARIANTS.items():
        cfg = TrainConfig(
            lr=2e-3,
            weight_decay=0.0,
            total_steps=150,
            stage1_steps=50,
            batch_size=4,
            seed=SEED,
            objective=objective,
            face_weights=weights,
            adversarial=False,
            checkpoint_every=150,
        )
        summary = run_training(
            cfg, MODEL, result.train, data, root / name, embedder, face_side=FACE_SIDE
        )
        model = load_checkpoint(summary.checkpoints[-1]).model
        for with_reference in (True, False):
            reports[name, with_reference] = evaluate_manifest(
                model_restorer(model),
                result.test,
                data,
                embedder,
                EvalConfig(face_side=FACE_SIDE, with_reference=with_reference),
            )
    return reports


def _mean(ablation, name: str, column: str, with_reference: bool = True) -> float:
    report = ablation[name, with_reference]
    assert not report.failures
    value = report.means[column]
    assert math.isfinite(value)
    return value


def test_face_supervision_raises_id_score(ablation):
    assert _mean(ablation, "full", "id_score") > _mean(ablation, "no_face", "id_score")


def test_reference_does_not_lower_id_score(ablation):
    with_ref = _mean(ablation, "full", "id_score", with_reference=True)
    without_ref = _mean(ablation, "full", "id_score", with_reference=False)
    assert with_ref >= without_ref


def test_identity_only_training_trades_structure_for_identity(ablation):
    assert _mean(ablation, "id_only", "id_score") > _mean(ablation, "full", "id_score")
    assert _mean(ablation, "id_only", "face_ssim") < _mean(ablation, "full", "face_ssim")
