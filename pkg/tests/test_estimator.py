import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from peft_forge.data import SlotValue, Triple, linearize
from peft_forge.errors import ContractError
from peft_forge.estimator import PeftGenerator, StructuredLinearizer
from peft_forge.synthetic import make_mr_corpus

SMALL = dict(dims="tiny", max_steps=4, batch_size=4, eval_every=2, max_decode_len=5)


@pytest.fixture(scope="module")
def corpus():
    return make_mr_corpus(12, 3, 3, seed=5)


def test_linearizer_transform():
    payloads = [(Triple("a", "b", "c"),), (SlotValue("name", "Aromi"), SlotValue("area", "riverside"))]
    out = StructuredLinearizer().fit(payloads).transform(payloads)
    assert out == ["<S> a <P> b <O> c", "<S> name <V> Aromi <S> area <V> riverside"]


def test_linearizer_fit_transform_and_not_fitted(corpus):
    assert StructuredLinearizer().fit_transform(corpus.instances) == [linearize(i) for i in corpus]
    with pytest.raises(NotFittedError):
        StructuredLinearizer().transform(corpus.instances)


def test_linearizer_rejects_bad_input():
    with pytest.raises(ContractError):
        StructuredLinearizer().fit("not a list")
    with pytest.raises(ContractError):
        StructuredLinearizer().fit([("a", "b")])


def test_generator_params_and_clone():
    gen = PeftGenerator(peft={"method": "lora", "rank": 2}, max_steps=7)
    params = gen.get_params()
    assert params["peft"] == {"method": "lora", "rank": 2} and params["max_steps"] == 7
    twin = clone(gen)
    assert twin.get_params()["peft"] == params["peft"] and twin is not gen
    gen.set_params(max_steps=3)
    assert gen.max_steps == 3


def test_generator_fit_predict_score(corpus):
    train, dev = corpus.split("train"), corpus.split("dev")
    gen = PeftGenerator(peft={"method": "lora", "rank": 2}, learning_rate=1e-2, **SMALL)
    assert gen.fit(train, eval_set=dev) is gen
    preds = gen.predict(dev)
    assert len(preds) == len(dev) and all(isinstance(p, str) for p in preds)
    assert 0.0 <= gen.score(dev) <= 100.0
    assert gen.history_.best_bleu == max(b for _, b in gen.history_.dev_bleu)


def test_generator_payloads_with_targets(corpus):
    train = corpus.split("train")
    X = [i.payload for i in train]
    y = [i.references[0] for i in train]
    gen = PeftGenerator(peft={"method": "ia3"}, **SMALL).fit(X, y, eval_set=(X[:2], y[:2]))
    assert len(gen.predict(X[:3])) == 3


def test_generator_deterministic(corpus):
    train = corpus.split("train")
    a = PeftGenerator(peft={"method": "lora", "rank": 2}, random_state=3, **SMALL).fit(train)
    b = PeftGenerator(peft={"method": "lora", "rank": 2}, random_state=3, **SMALL).fit(train)
    assert a.history_.losses == b.history_.losses


def test_generator_errors(corpus):
    with pytest.raises(NotFittedError):
        PeftGenerator().predict(corpus.instances)
    with pytest.raises(ContractError):
        PeftGenerator(**SMALL).fit(corpus.split("train"), ["only one"])
    with pytest.raises(ContractError):
        PeftGenerator(learning_rate=-1.0, **SMALL).fit(corpus.split("train"))
