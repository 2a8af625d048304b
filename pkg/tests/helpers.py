"""Shared fixtures for tests that need hand-built samples."""
import numpy as np

from lvt import data as D
from lvt.trace import BBox


def make_sample(sid, answer=("red",), focus=0.5, qtype="attribute", degenerate=False, with_supervision=True):
    scene = np.full((2, 2), -1)
    scene[0, 0] = D.encode_object("circle", answer[0] if answer[0] in D.COLORS else "red")
    sup = None
    if with_supervision:
        sup = D.Supervision(gaze=np.full(4, 0.25), a_traj=np.zeros(4), sparse_target=np.full(4, 0.25),
                            v_sem=np.ones(3), focus=focus, degenerate=degenerate)
    return D.Sample(
        sample_id=sid, scene=scene, pixels=np.zeros((4, 48)), qtype=qtype,
        question=[D.SYS] + [D.TOKEN[w] for w in ("what", "color", "is", "the", "circle")],
        answer=[D.TOKEN[w] for w in answer], bbox=BBox(0, 0, 1, 1),
        categories=[D.ATTRIBUTE, D.FUNCTIONAL], supervision=sup,
    )


def filter_fixture():
    """Seven samples: two the teacher gets wrong, one the text-only model solves,
    one misaligned (focus 0.10) and three clean ones."""
    red, blue = [D.TOKEN["red"]], [D.TOKEN["blue"]]
    samples = [make_sample(f"f{i}", focus=0.5) for i in range(7)]
    samples[4].supervision.focus = 0.10
    teacher = {s.sample_id: red for s in samples}
    teacher["f0"] = blue
    teacher["f1"] = blue
    text_only = {s.sample_id: blue for s in samples}
    text_only["f3"] = red
    return samples, teacher, text_only


VERDICTS = []  # acceptance lines, repeated in the terminal summary by conftest
