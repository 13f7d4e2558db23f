"""
Shared fixtures for the slow checks that need a meta-trained penicillin model.
"""

import pytest

from fedbatch_bo.dynamics import SolverSettings
from fedbatch_bo.sanodep import CHECKPOINT_NAME, SanodepConfig, SanodepModel, Trainer
from fedbatch_bo.tasking import EpisodeConfig, PenicillinSystems

TRAINED_SOLVER = SolverSettings(step=0.1, n_grid=50)


@pytest.fixture(scope="session")
def trained_checkpoint(tmp_path_factory):
    """Checkpoint of a small model meta-trained on on-task-train penicillin systems."""
    episodes = EpisodeConfig(max_trajectories=4, max_context=6, max_target=12, n_grid=50, n_x0=4, n_sys=4,
                             min_update=2, max_update=4)
    config = SanodepConfig(n_l=8, n_d=8, encoder_widths=(64,), r_dim=64, ode_widths=(64,), decoder_widths=(64,),
                           learning_rate=3e-3, steps=1500, substeps=5, checkpoint_every=1500, log_every=100,
                           episodes=episodes)
    out = tmp_path_factory.mktemp("trained")
    Trainer(config, PenicillinSystems(solver=TRAINED_SOLVER), seed=0).run(out_dir=out)
    return out / CHECKPOINT_NAME


@pytest.fixture(scope="session")
def trained_model(trained_checkpoint):
    return SanodepModel.from_checkpoint(trained_checkpoint)


@pytest.fixture(scope="session")
def trained_solver():
    return TRAINED_SOLVER
