import json
import os

import numpy as np
import pytest

from coherence_lab import tensor as T
from coherence_lab import text
from coherence_lab.main import CliConfig, main
from coherence_lab.errors import ConfigError

TINY = {'architecture': {'d_model': 8, 'n_layers': 1, 'n_heads': 2, 'max_seq_len': 32},
        'train': {'epochs': 1, 'batch_size': 4}}


def write_json(path, values):
    with open(path, 'w') as f:
        json.dump(values, f)
    return str(path)


def read_lines(path):
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def test_no_command_prints_help(capsys):
    assert main([]) == 0
    assert 'gen-synth' in capsys.readouterr().out
    assert main(['shuffle']) == 1
    assert main(['gen-synth']) == 1


def test_gen_synth(tmp_path):
    first, second = str(tmp_path / 'a.jsonl'), str(tmp_path / 'b.jsonl')
    assert main(['gen-synth', '--out', first, '--docs', '9', '--sents', '3', '--seed', '4']) == 0
    assert main(['gen-synth', '--out', second, '--docs', '9', '--sents', '3', '--seed', '4']) == 0
    with open(first, 'rb') as fa, open(second, 'rb') as fb:
        assert fa.read() == fb.read()
    documents = text.read_corpus(first)
    assert len(documents) == 9 and all(d.n_sentences == 3 for d in documents)


def test_gen_synth_edge_cases(tmp_path):
    empty = tmp_path / 'empty.jsonl'
    assert main(['gen-synth', '--out', str(empty), '--docs', '0']) == 0
    assert empty.read_text() == ''
    assert main(['gen-synth', '--out', str(tmp_path / 'x.jsonl'), '--sents', '1']) == 1
    assert not (tmp_path / 'x.jsonl').exists()


def test_gen_synth_side_outputs(tmp_path):
    corpus, entail, facts = (str(tmp_path / n) for n in ('c.jsonl', 'e.jsonl', 'f.jsonl'))
    assert main(['gen-synth', '--out', corpus, '--docs', '4', '--coherent-only', '--entail-out', entail,
                 '--n-entail', '6', '--facts-out', facts]) == 0
    assert {d.label3 for d in text.read_corpus(corpus)} == {'high'}
    assert len(text.read_entailment(entail)) == 6
    loaded = text.load_facts_sidecar(facts, {d.id: d for d in text.read_corpus(corpus)})
    assert len(loaded) == 16


def test_permute(tmp_path):
    corpus = str(tmp_path / 'corpus.jsonl')
    text.write_corpus(corpus, [text.Document('two', 'A b. C d.', label3='high'),
                               text.Document('four', 'A. B. C. D.', label3='low'),
                               text.Document('one', 'Alone here.', label3='high')])
    out = str(tmp_path / 'perms.jsonl')
    with pytest.warns(UserWarning, match='1 document'):
        assert main(['permute', '--corpus', corpus, '--out', out, '--k', '20']) == 0
    counts = {}
    for record in read_lines(out):
        counts[record['original_id']] = counts.get(record['original_id'], 0) + 1
    assert counts == {'two': 1, 'four': 20}

    with pytest.warns(UserWarning):
        assert main(['permute', '--corpus', corpus, '--out', out, '--only-high']) == 0
    assert [r['original_id'] for r in read_lines(out)] == ['two']


def test_permute_errors(tmp_path):
    assert main(['permute', '--corpus', str(tmp_path / 'missing.jsonl'), '--out', str(tmp_path / 'p')]) == 2
    bad = tmp_path / 'bad.jsonl'
    bad.write_text('{"id": "a"}\n')
    assert main(['permute', '--corpus', str(bad), '--out', str(tmp_path / 'p')]) == 2


def test_cli_config(tmp_path):
    config = CliConfig.load(write_json(tmp_path / 'c.json', dict(TINY, task='3way', corpus='c.jsonl')))
    assert config.train_config.epochs == 1 and config.arch == 'vanilla'
    with pytest.raises(ConfigError):
        CliConfig.load(write_json(tmp_path / 'bad.json', {'task': '3way', 'colour': 'red'}))
    with pytest.raises(ConfigError):
        CliConfig(architecture={'depth': 3})
    with pytest.raises(ConfigError):
        CliConfig(train={'epochs': -1})


def test_train_configuration_errors(tmp_path):
    corpus = str(tmp_path / 'corpus.jsonl')
    assert main(['gen-synth', '--out', corpus, '--docs', '6', '--sents', '3']) == 0
    assert main(['train', '--corpus', corpus, '--task', 'order']) == 1
    assert main(['train', '--corpus', corpus, '--task', '3way', '--arch', 'mtl']) == 1
    assert main(['train', '--corpus', corpus]) == 1
    assert main(['train', '--task', '3way', '--config', write_json(tmp_path / 'c.json', {'epochs': 3})]) == 1
    assert main(['train', '--task', '3way', '--corpus', str(tmp_path / 'missing.jsonl')]) == 2


@pytest.fixture
def trained(tmp_path):
    corpus = str(tmp_path / 'corpus.jsonl')
    out = str(tmp_path / 'runs')
    assert main(['gen-synth', '--out', corpus, '--docs', '12', '--sents', '3', '--seed', '1']) == 0
    config = write_json(tmp_path / 'config.json', dict(TINY, corpus=corpus, task='3way', out=out))
    assert main(['train', '--config', config, '--seeds', '1', '--lr', '0.01']) == 0
    return corpus, out


def test_train_writes_reports(trained):
    _, out = trained
    assert sorted(os.listdir(out)) == ['aggregate.json', 'model_seed0', 'run_seed0.json']
    with open(os.path.join(out, 'aggregate.json')) as f:
        report = json.load(f)
    assert report['task'] == '3way' and report['seeds'] == [0]
    assert report['std'] == {'accuracy': 0.0}
    assert sorted(os.listdir(os.path.join(out, 'model_seed0'))) == ['architecture.json', 'params.bin',
                                                                     'params.json', 'vocab.json']


def test_eval(trained, tmp_path):
    corpus, out = trained
    checkpoint = os.path.join(out, 'model_seed0')
    metrics_path = str(tmp_path / 'eval' / 'metrics.json')
    assert main(['eval', '--checkpoint', checkpoint, '--corpus', corpus, '--out', metrics_path, '--plot']) == 0
    with open(metrics_path) as f:
        records = json.load(f)
    assert records == [{'task': '3way', 'metric': 'accuracy', 'value': records[0]['value'], 'n': 12}]
    assert 0 <= records[0]['value'] <= 1
    assert (tmp_path / 'eval' / 'confusion_matrix.png').exists()

    assert main(['eval', '--checkpoint', checkpoint, '--corpus', corpus, '--task', 'score']) == 2
    assert main(['eval', '--checkpoint', checkpoint, '--corpus', str(tmp_path / 'missing.jsonl')]) == 2
    assert main(['eval', '--checkpoint', str(tmp_path / 'nowhere'), '--corpus', corpus]) == 2


def test_order_task_end_to_end(tmp_path):
    corpus, perms, out = (str(tmp_path / n) for n in ('corpus.jsonl', 'perms.jsonl', 'runs'))
    assert main(['gen-synth', '--out', corpus, '--docs', '8', '--sents', '3', '--coherent-only']) == 0
    assert main(['permute', '--corpus', corpus, '--out', perms, '--k', '2']) == 0
    config = write_json(tmp_path / 'config.json', dict(TINY, corpus=corpus, permutations=perms, arch='hier'))
    assert main(['train', '--config', config, '--task', 'order', '--seeds', '2', '--out', out]) == 0
    assert sorted(os.listdir(out)) == ['aggregate.json', 'model_seed0', 'model_seed1', 'run_seed0.json',
                                       'run_seed1.json']

    checkpoint = os.path.join(out, 'model_seed1')
    assert main(['eval', '--checkpoint', checkpoint, '--corpus', corpus]) == 1
    assert main(['eval', '--checkpoint', checkpoint, '--corpus', corpus, '--perms', perms]) == 0
    with open(os.path.join(checkpoint, 'metrics.json')) as f:
        assert json.load(f)[0]['metric'] == 'pra'


def test_gradcheck(tmp_path, capsys):
    out = str(tmp_path / 'gradcheck.json')
    assert main(['gradcheck', '--arch', 'vanilla', '--max-elements', '16', '--out', out]) == 0
    assert 'PASS' in capsys.readouterr().out
    with open(out) as f:
        report = json.load(f)
    assert report['passed'] and report['architecture'] == 'vanilla' and report['max_rel_error'] < 1e-4

    assert main(['gradcheck', '--arch', 'fact', '--tol', '0', '--max-elements', '4']) == 3
    assert 'FAIL' in capsys.readouterr().out


def test_gradcheck_detects_wrong_backward(monkeypatch):
    monkeypatch.setattr(T.Relu, 'backward', lambda self, grad: (np.zeros_like(grad),))
    assert main(['gradcheck', '--arch', 'vanilla', '--max-elements', '16']) == 3


def test_multi_task_vocabulary_covers_entailment_texts(tmp_path):
    corpus, entail, out = (str(tmp_path / n) for n in ('corpus.jsonl', 'entail.jsonl', 'runs'))
    assert main(['gen-synth', '--out', corpus, '--docs', '12', '--sents', '3', '--entail-out', entail]) == 0
    config = write_json(tmp_path / 'config.json', dict(TINY, corpus=corpus, entailment=entail, arch='mtl'))
    assert main(['train', '--config', config, '--task', '3way', '--seeds', '1', '--out', out]) == 0
    vocab = text.Vocabulary.load(os.path.join(out, 'model_seed0', 'vocab.json'))
    assert 'knows' in vocab.tokens
    for example in text.read_entailment(entail):
        assert text.UNK_ID not in text.tokenize(vocab, f'{example.premise} {example.hypothesis}')


def test_train_prints_task_metric_first(tmp_path, capsys):
    corpus = str(tmp_path / 'corpus.jsonl')
    assert main(['gen-synth', '--out', corpus, '--docs', '12', '--sents', '3']) == 0
    config = write_json(tmp_path / 'config.json', dict(TINY, corpus=corpus, task='2way', out=str(tmp_path / 'r')))
    capsys.readouterr()
    assert main(['train', '--config', config, '--seeds', '1']) == 0
    metric_lines = [line for line in capsys.readouterr().out.splitlines() if ' +- ' in line]
    assert metric_lines[0].startswith('f0.5:')
    assert len(metric_lines) > 1


def test_score_task_on_constant_gold_stops_before_training(tmp_path):
    corpus, out = str(tmp_path / 'corpus.jsonl'), tmp_path / 'runs'
    assert main(['gen-synth', '--out', corpus, '--docs', '10', '--coherent-only']) == 0
    assert main(['train', '--corpus', corpus, '--task', 'score', '--out', str(out)]) == 2
    assert not out.exists()
