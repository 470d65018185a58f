import numpy as np
import pytest
from hypothesis import settings

from gated_paraling.audio_io import AudioClip

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


def tone(freq=440.0, seconds=1.0, sr=16000, amp=0.5, phase=0.0):
    t = np.arange(int(round(seconds * sr))) / sr
    return AudioClip(amp * np.sin(2 * np.pi * freq * t + phase), sr)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance verdicts, one line per criterion, echoed at the end of the run
VERDICTS: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
