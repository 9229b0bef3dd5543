import subprocess
import sys

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from gradients import rel_error
from unipercept.text_branch import (
    EmptyTextError,
    NegativePoolExhausted,
    StudentEncoder,
    TeacherEncoder,
    distill,
    distillation_loss,
    encode_categories,
    encode_expression,
    pad_category_list,
    tokenize,
)


@pytest.fixture(scope="module")
def student():
    torch.manual_seed(0)
    return StudentEncoder().eval()


def _alone(student, sentence):
    """Token outputs for one sentence run on its own, without any padding."""
    ids = torch.tensor([student.tokenize(sentence)])
    x = student.token_embed(ids) + student.pos_embed[: ids.shape[1]]
    return student.encoder(x)[0]


class BagOfTokens:
    """Order-free encoder: the mean of fixed per-token vectors."""

    def __init__(self, dim=8):
        self.teacher = TeacherEncoder(dim=dim, token_dim=dim)

    def __call__(self, sentences):
        rows = [np.mean([self.teacher._token_vector(i) for i in tokenize(s)], axis=0) for s in sentences]
        return torch.tensor(np.stack(rows))


def test_tokenize_lowercase_whitespace():
    assert tokenize("The  Red\tsquare") == tokenize("the red square")
    assert len(tokenize("a b c")) == 3
    assert tokenize("") == []


# --------------------------------------------------------------- encoding


def test_single_token_name_is_its_token_output(student):
    with torch.no_grad():
        rows = encode_categories(["circle"], student)
        tokens, _ = student.encode_tokens(["circle"])
    assert torch.allclose(rows[0], tokens[0, 0])


def test_repeated_name_identical_rows(student):
    with torch.no_grad():
        rows = encode_categories(["red square", "red square"], student)
    assert torch.equal(rows[0], rows[1])


def test_multi_token_rows_match_independent_means(student):
    names = ["small blue circle", "triangle", "the big green square"]
    with torch.no_grad():
        rows = encode_categories(names, student)
        for i, n in enumerate(names):
            assert torch.allclose(rows[i], _alone(student, n).mean(0), atol=1e-5)


def test_batch_composition_does_not_leak(student):
    with torch.no_grad():
        a = encode_categories(["star"], student)[0]
        b = encode_categories(["a very long name with many tokens", "star"], student)[1]
    assert torch.allclose(a, b, atol=1e-5)


def test_empty_category_name(student):
    with pytest.raises(EmptyTextError, match="empty category name"):
        encode_categories(["cat", "  "], student)
    with pytest.raises(ValueError):
        encode_categories([], student)


def test_expression_single_token(student):
    with torch.no_grad():
        tokens, _ = student.encode_tokens(["left"])
        assert torch.allclose(encode_expression("left", student), tokens[0, 0])


def test_expression_order_free_with_bag_encoder():
    enc = BagOfTokens()
    assert torch.allclose(encode_expression("the red square", enc), encode_expression("square the red", enc))


def test_expression_brute_force_mean(student):
    with torch.no_grad():
        got = encode_expression("the red square", student)
        tok = _alone(student, "the red square")
    assert tok.shape[0] == 3
    assert torch.allclose(got, (tok[0] + tok[1] + tok[2]) / 3, atol=1e-5)


def test_empty_expression(student):
    with pytest.raises(EmptyTextError):
        encode_expression("", student)


def test_student_width_matches_teacher(student):
    t = TeacherEncoder()
    with torch.no_grad():
        assert student(["x"]).shape[-1] == t.encode_batch(["x"]).shape[-1]


# ---------------------------------------------------------------- teacher


def test_teacher_deterministic_and_normalized():
    t = TeacherEncoder()
    a, b = t.encode("the red square"), TeacherEncoder().encode("the red square")
    assert np.array_equal(a, b)
    assert np.linalg.norm(a) == pytest.approx(1.0)
    with pytest.raises(EmptyTextError):
        t.encode("   ")


def test_teacher_matches_manual_recipe():
    t = TeacherEncoder()
    ids = tokenize("the red square")
    bag = sum(t._token_vector(i) for i in ids) / 3
    v = bag @ t._proj
    assert np.allclose(t.encode("the red square"), v / np.linalg.norm(v), atol=1e-12)


def test_teacher_bit_identical_across_processes():
    code = "from unipercept.text_branch import TeacherEncoder; import sys; sys.stdout.write(TeacherEncoder(seed=3).encode('blue circle').tobytes().hex())"
    outs = [subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, check=True).stdout for _ in range(2)]
    assert outs[0] == outs[1] == TeacherEncoder(seed=3).encode("blue circle").tobytes().hex()


# -------------------------------------------------------------- padding


def test_pad_to_100():
    out = pad_category_list([4, 7, 9], range(10, 1210), 100, rng=0)
    assert len(out) == 100
    assert out[:3] == [4, 7, 9]
    assert len(set(out)) == 100
    assert all(c >= 10 for c in out[3:])


def test_pad_already_full_unchanged():
    pos = list(range(100))
    assert pad_category_list(pos, [500, 501], 100, rng=0) == pos
    more = list(range(130))
    assert pad_category_list(more, [], 100) == more


def test_pad_replay():
    a = pad_category_list([1, 2], range(3, 400), 50, rng=11)
    b = pad_category_list([1, 2], range(3, 400), 50, rng=11)
    assert a == b


def test_pad_pool_exhausted():
    with pytest.raises(NegativePoolExhausted, match="negative pool exhausted"):
        pad_category_list([0, 1], [2, 3], 10)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 20), st.integers(0, 40), st.integers(0, 2**32 - 1))
def test_pad_properties(n_pos, extra, seed):
    target = 20
    pos = list(range(n_pos))
    pool = list(range(1000, 1000 + max(0, target - n_pos) + extra))
    out = pad_category_list(pos, pool, target, rng=seed)
    assert len(out) == max(target, n_pos)
    assert len(set(out)) == len(out)
    assert out[:n_pos] == pos


# ----------------------------------------------------------- distillation


def test_distillation_identity():
    x = torch.randn(4, 6)
    assert float(distillation_loss(x, x.clone())) == 0.0


def test_distillation_scalar():
    s = torch.tensor([[1.5, 0.5]])
    t = torch.tensor([[1.0, 1.0]])
    assert float(distillation_loss(s, t)) == 1.0


def test_distillation_duplicate_rows_unchanged():
    s, t = torch.randn(3, 5, dtype=torch.float64), torch.randn(3, 5, dtype=torch.float64)
    a = distillation_loss(s, t)
    b = distillation_loss(torch.cat([s, s]), torch.cat([t, t]))
    assert torch.allclose(a, b)


def test_distillation_shape_mismatch():
    with pytest.raises(ValueError):
        distillation_loss(torch.zeros(2, 3), torch.zeros(3, 2))


def test_distillation_gradient():
    rng = np.random.default_rng(0)
    teacher = torch.tensor(rng.normal(size=(3, 4)))
    offs = rng.uniform(0.1, 1, (3, 4)) * rng.choice([-1, 1], (3, 4))
    assert rel_error(lambda s: distillation_loss(s, teacher), teacher + torch.tensor(offs)) <= 1e-4


def test_distill_reduces_loss():
    torch.manual_seed(0)
    st_ = StudentEncoder()
    hist = distill(st_, TeacherEncoder(), ["red square", "blue circle", "the green star"], steps=60, lr=3e-3)
    assert hist[-1] < 0.5 * hist[0]
    assert not st_.training
