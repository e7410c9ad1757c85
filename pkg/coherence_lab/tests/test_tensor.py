import numpy as np
import pytest
from numpy import testing

from coherence_lab import tensor as T
from coherence_lab.errors import ContractError, DimensionError, InvalidCheckError, NumericError, TargetError, VocabError


def test_matmul_examples():
    a = T.Tensor([[1., 2.], [3., 4.]])
    testing.assert_array_equal(T.matmul(T.Tensor(np.eye(2)), a).data, a.data)
    testing.assert_array_equal(T.matmul(a, T.Tensor([[5.], [6.]])).data, [[17.], [39.]])
    with pytest.raises(DimensionError) as ex:
        T.matmul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((2, 3))))
    assert '(2, 3)' in str(ex.value)


def test_matmul_gradients():
    a = T.Tensor(np.random.default_rng(0).normal(size=(2, 3)), requires_grad=True)
    b = T.Tensor(np.random.default_rng(1).normal(size=(3, 4)), requires_grad=True)
    T.reduce_sum(T.matmul(a, b)).backward()
    testing.assert_allclose(a.grad, np.ones((2, 4)) @ b.data.T)
    testing.assert_allclose(b.grad, a.data.T @ np.ones((2, 4)))


def test_softmax_examples():
    testing.assert_allclose(T.softmax(T.Tensor([0., 0.])).data, [0.5, 0.5])
    testing.assert_allclose(T.softmax(T.Tensor([np.log(2), 0.])).data, [2 / 3, 1 / 3])
    testing.assert_allclose(T.softmax(T.Tensor([1000., 1000.])).data, [0.5, 0.5])

    x = T.softmax(T.Tensor(np.random.default_rng(2).normal(size=(5, 7)) * 10))
    testing.assert_allclose(x.data.sum(axis=-1), 1, atol=1e-12)
    assert np.all(x.data > 0)


def test_masked_softmax_gives_zero_weight():
    mask = np.array([True, False, True])
    out = T.softmax(T.Tensor([1., 50., 2.]), mask=mask).data
    assert out[1] == 0
    testing.assert_allclose(out.sum(), 1)


def test_layer_norm_examples():
    ones, zeros = T.Tensor([1., 1.]), T.Tensor([0., 0.])
    testing.assert_allclose(T.layer_norm(T.Tensor([1., 3.]), ones, zeros, eps=0).data, [-1, 1])
    testing.assert_array_equal(T.layer_norm(T.Tensor([[4., 4., 4.]]), T.Tensor(np.ones(3)), T.Tensor(np.zeros(3)),
                                            eps=1e-5).data, np.zeros((1, 3)))
    bias = T.Tensor([0.5, -2.])
    testing.assert_array_equal(T.layer_norm(T.Tensor([7., 1.]), T.Tensor([0., 0.]), bias).data, bias.data)
    with pytest.raises(DimensionError):
        T.layer_norm(T.Tensor([1., 2., 3.]), ones, zeros)


def test_cross_entropy_examples():
    testing.assert_allclose(T.cross_entropy(T.Tensor(np.zeros((3, 4))), [0, 1, 3]).item(), np.log(4))
    testing.assert_allclose(T.cross_entropy(T.Tensor([[1., 0.]]), [0]).item(), np.log(1 + np.exp(-1)))
    assert T.cross_entropy(T.Tensor([[50., 0.]]), [0]).item() < 1e-20
    with pytest.raises(TargetError):
        T.cross_entropy(T.Tensor([[1., 0.]]), [2])
    with pytest.raises(IndexError):
        T.cross_entropy(T.Tensor([[1., 0.]]), [-1])


def test_mse_examples():
    assert T.mse(T.Tensor([1., 2.]), T.Tensor([1., 2.])).item() == 0
    assert T.mse(T.Tensor([1.]), T.Tensor([3.])).item() == 4
    assert T.mse(T.Tensor([0., 2.]), T.Tensor([0., 0.])).item() == 2
    with pytest.raises(DimensionError):
        T.mse(T.Tensor([0., 2.]), T.Tensor([0.]))


def test_margin_ranking_examples():
    assert T.margin_ranking_loss(T.Tensor([2.]), T.Tensor([0.]), 1.0).item() == 0
    testing.assert_allclose(T.margin_ranking_loss(T.Tensor([0.5]), T.Tensor([0.3]), 1.0).item(), 0.8)
    assert T.margin_ranking_loss(T.Tensor([0.4]), T.Tensor([0.4]), 1.0).item() == 1
    with pytest.raises(ContractError):
        T.margin_ranking_loss(T.Tensor([0.]), T.Tensor([0.]), -1.0)


def test_margin_ranking_hinge_subgradient_is_zero():
    s_pos, s_neg = T.Tensor([1.], requires_grad=True), T.Tensor([0.], requires_grad=True)
    T.margin_ranking_loss(s_pos, s_neg, 1.0).backward()
    testing.assert_array_equal(s_pos.grad, [0.])
    testing.assert_array_equal(s_neg.grad, [0.])


def test_backward_examples():
    x = T.Tensor(np.random.default_rng(0).normal(size=(2, 3, 4)), requires_grad=True)
    x.sum().backward()
    testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))

    a, b = T.Tensor(3., requires_grad=True), T.Tensor(5., requires_grad=True)
    (a * b).backward()
    assert a.grad == 5 and b.grad == 3


def test_backward_accumulates_and_needs_scalar():
    x = T.Tensor([1., 2.], requires_grad=True)
    x.sum().backward()
    x.sum().backward()
    testing.assert_array_equal(x.grad, [2., 2.])
    x.zero_grad()
    assert x.grad is None
    with pytest.raises(ContractError):
        (x * 2.0).backward()


def test_backward_visits_shared_nodes_once():
    x = T.Tensor([1., 2., 3.], requires_grad=True)
    y = x * 2.0
    T.reduce_sum(T.add(y, y)).backward()
    testing.assert_array_equal(x.grad, [4., 4., 4.])
    assert len(T.build_graph(T.reduce_sum(T.add(y, y)))) == 4


def test_backward_is_deterministic():
    rng = np.random.default_rng(3)
    x, w = rng.normal(size=(4, 5)), rng.normal(size=(5, 2))

    def grads():
        xt, wt = T.Tensor(x, requires_grad=True), T.Tensor(w, requires_grad=True)
        T.cross_entropy(T.gelu(T.matmul(xt, wt)), [0, 1, 1, 0]).backward()
        return xt.grad, wt.grad

    for g1, g2 in zip(grads(), grads()):
        testing.assert_array_equal(g1, g2)


def test_non_finite_forward_is_an_error():
    with pytest.raises(NumericError):
        T.layer_norm(T.Tensor([2., 2.]), T.Tensor([1., 1.]), T.Tensor([0., 0.]), eps=0)


def test_embedding_lookup_scatter_adds():
    table = T.Tensor(np.arange(12.).reshape(4, 3), requires_grad=True)
    out = T.embedding_lookup(table, np.array([[1, 1], [3, 0]]))
    testing.assert_array_equal(out.data[0, 0], [3., 4., 5.])
    out.sum().backward()
    testing.assert_array_equal(table.grad[:, 0], [1., 2., 0., 1.])
    with pytest.raises(VocabError):
        T.embedding_lookup(table, [4])


def test_dropout_modes():
    x = T.Tensor(np.ones(10000))
    assert T.dropout(x, 0.5, training=False) is x
    assert T.dropout(x, 0.0, training=True, rng=np.random.default_rng(0)) is x
    out = T.dropout(x, 0.25, training=True, rng=np.random.default_rng(0)).data
    assert set(np.unique(out)) <= {0.0, 1 / 0.75}
    testing.assert_allclose(out.mean(), 1, atol=0.05)
    with pytest.raises(ContractError):
        T.dropout(x, 0.5, training=True)


_weights = np.random.default_rng(42).normal(size=20)


def _weighted(out):
    flat = T.reshape(out, (out.size,))
    return T.reduce_sum(T.mul(flat, T.Tensor(_weights[:out.size])))


PRIMITIVES = {
    'add': lambda x: T.add(x, T.Tensor(np.linspace(0, 1, 10))),
    'mul': lambda x: T.mul(x, x),
    'sub': lambda x: T.sub(T.scale(x, 3.0), x),
    'relu': lambda x: T.relu(x),
    'gelu': lambda x: T.gelu(x),
    'softmax': lambda x: T.softmax(T.reshape(x, (2, 5))),
    'log_softmax': lambda x: T.log_softmax(T.reshape(x, (2, 5))),
    'layer_norm': lambda x: T.layer_norm(T.reshape(x, (2, 5)), T.Tensor(np.linspace(0.5, 1.5, 5)),
                                         T.Tensor(np.linspace(-1, 1, 5))),
    'transpose': lambda x: T.transpose(T.reshape(x, (2, 5)), (1, 0)),
    'take': lambda x: T.take(T.reshape(x, (2, 5)), [4, 0, 0], axis=1),
    'concat': lambda x: T.concat([x, T.scale(x, 2.0)], axis=0),
    'mean': lambda x: T.reduce_mean(T.reshape(x, (2, 5)), axis=1),
    'sum': lambda x: T.reduce_sum(T.reshape(x, (5, 2)), axis=0),
    'max': lambda x: T.reduce_max(T.reshape(x, (2, 5)), axis=1),
    'min': lambda x: T.reduce_min(T.reshape(x, (2, 5)), axis=1),
    'matmul': lambda x: T.matmul(T.reshape(x, (5, 2)), T.Tensor([[1., -2.], [0.5, 3.]])),
    'cross_entropy': lambda x: T.cross_entropy(T.reshape(x, (2, 5)), [3, 1]),
    'mse': lambda x: T.mse(x, T.Tensor(np.linspace(-1, 1, 10))),
    'margin': lambda x: T.margin_ranking_loss(T.take(x, np.arange(5)), T.take(x, np.arange(5, 10)), 3.0),
}


@pytest.mark.parametrize('name', sorted(PRIMITIVES))
def test_primitive_gradients_match_finite_differences(name):
    x = T.Tensor(np.random.default_rng(7).normal(size=10), requires_grad=True)
    report = T.gradcheck(lambda t: _weighted(PRIMITIVES[name](t)), x, eps=1e-5, tol=1e-6)
    assert report.passed, (name, report.max_rel_error, report.worst)
    assert report.n_checked == 10


def test_gradcheck_examples():
    x = T.Tensor([1., 2.], requires_grad=True)
    report = T.gradcheck(lambda t: T.reduce_sum(T.mul(t, t)), x, tol=1e-6)
    assert report.passed
    assert report.max_rel_error < 1e-6

    rng = np.random.default_rng(0)
    params = {'w': T.Tensor(rng.normal(size=(4, 3)), requires_grad=True),
              'b': T.Tensor(rng.normal(size=3), requires_grad=True)}
    inputs = T.Tensor(rng.normal(size=(5, 4)))
    report = T.gradcheck(lambda p: T.cross_entropy(T.add(T.matmul(inputs, p['w']), p['b']), [0, 2, 1, 1, 0]),
                         params, tol=1e-4)
    assert report.passed
    assert report.n_checked == 15


def test_gradcheck_rejects_dropout():
    x = T.Tensor(np.ones(4), requires_grad=True)
    rng = np.random.default_rng(0)
    with pytest.raises(InvalidCheckError):
        T.gradcheck(lambda t: T.reduce_sum(T.dropout(t, 0.5, training=True, rng=rng)), x)


def test_gradcheck_rejects_non_deterministic_function():
    x = T.Tensor(np.ones(4), requires_grad=True)
    rng = np.random.default_rng(0)
    with pytest.raises(InvalidCheckError):
        T.gradcheck(lambda t: T.reduce_sum(T.mul(t, T.Tensor(rng.normal(size=4)))), x)


def test_gradcheck_zero_tolerance_fails():
    x = T.Tensor([1., 2.], requires_grad=True)
    assert not T.gradcheck(lambda t: T.reduce_sum(T.gelu(t)), x, tol=0).passed


def test_gradcheck_detects_wrong_backward(monkeypatch):
    monkeypatch.setattr(T.Relu, 'backward', lambda self, grad: (grad,))
    x = T.Tensor([-1., 2., -3.], requires_grad=True)
    report = T.gradcheck(lambda t: T.reduce_sum(T.relu(t)), x, tol=1e-4)
    assert not report.passed
    assert report.worst[0] == 'x'


def test_detach_drops_the_graph():
    x = T.Tensor([1., 2.], requires_grad=True)
    y = T.scale(x, 2.0).detach()
    assert y.is_leaf and not y.requires_grad
    testing.assert_array_equal(y.data, [2., 4.])
