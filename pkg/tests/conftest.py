"""Shared fixtures for the long training runs behind the acceptance suite."""
import time

import numpy as np
import pytest

from talkinghead.config import Config
from talkinghead.metrics import heatmap_hits, mouth_intensity, pearson, psnr
from talkinghead.sync import prepare_sync_data, sync_margin, train_sync
from talkinghead.synth import synth_identity, synth_sequence
from talkinghead.train import Trainer, render_sequence

OVERFIT_SEED = 100
_verdicts: list[tuple[int, bool, str]] = []


def record(criterion: int, passed: bool, detail: str) -> None:
    line = f"criterion {criterion:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    print(line)
    _verdicts.append((criterion, passed, line))


def pytest_terminal_summary(terminalreporter):
    if not _verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for _, _, line in sorted(_verdicts):
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def sync_run():
    """Discriminator trained on 8 sequences x 200 frames, plus its held-out margin."""
    t0 = time.perf_counter()
    seqs = [synth_sequence(synth_identity(s), 200, s) for s in range(8)]
    cfg = Config()
    disc, history = train_sync(seqs, cfg)
    data = prepare_sync_data(seqs, cfg.sync_frames, cfg.lip_h, cfg.lip_w)
    pos, neg = sync_margin(disc, data, n_pairs=400, seed=1)
    return {"disc": disc, "history": history, "pos": pos, "neg": neg, "seconds": time.perf_counter() - t0}


class OverfitRun:
    def __init__(self, deform: bool, disc):
        self.seq = synth_sequence(synth_identity(OVERFIT_SEED), 16, OVERFIT_SEED)
        self.cfg = Config(deform_enabled=deform)
        t0 = time.perf_counter()
        trainer = Trainer(self.cfg, self.seq, disc)
        self.reports = trainer.run()
        self.model, self.source = trainer.model, trainer.source_index
        self.frames = render_sequence(self.model, self.seq, self.source)
        self.seconds = time.perf_counter() - t0
        self.steps = trainer.step
        self.psnr = float(np.mean([psnr(f, g) for f, g in zip(self.frames, self.seq.frames)]))
        self.r = pearson(mouth_intensity(self.frames, self.seq), self.seq.envelope)
        self.hits = heatmap_hits(self.model, self.seq, self.source)


@pytest.fixture(scope="session")
def overfit_full(sync_run):
    return OverfitRun(True, sync_run["disc"])


@pytest.fixture(scope="session")
def overfit_no_deform(sync_run):
    return OverfitRun(False, sync_run["disc"])
