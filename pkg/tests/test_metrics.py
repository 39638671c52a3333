import math
from fractions import Fraction

import numpy as np
import pytest

from pixelrcnn.errors import DataError, FormatError, UndefinedMetricError
from pixelrcnn.metrics import (
    ConfusionMatrix,
    class_metrics,
    cohen_kappa,
    confusion_accumulate,
    confusion_from_labels,
    load_matrix_csv,
    overall_accuracy,
    parse_matrix_csv,
    render_csv,
    render_report,
)

# Per-class percentages as printed in the reference report (PA column, UA row).
REPORTED_PA = [98, 99, 98, 98, 93, 95, 86, 73, 65, 100, 98, 98, 91, 96, 99]
REPORTED_UA = [94, 97, 99, 89, 98, 96, 64, 93, 68, 99, 96, 99, 96, 95, 98]


def kappa_oracle(rows):
    """Independent kappa: exact rationals from nested lists."""
    n = sum(sum(r) for r in rows)
    K = len(rows)
    po = Fraction(sum(rows[k][k] for k in range(K)), n)
    pe = sum(Fraction(sum(rows[k]), n) * Fraction(sum(r[k] for r in rows), n) for k in range(K))
    return float((po - pe) / (1 - pe))


def test_reference_fixture_totals(reference_confusion_path):
    cm = load_matrix_csv(reference_confusion_path)
    assert cm.K == 15 and cm.total == 36846
    assert int(np.trace(cm.counts)) == 35610
    assert cm.row_totals.tolist() == [1111, 3808, 3031, 1991, 5360, 1287, 165, 168, 368, 906, 7338, 328, 2349, 846, 7790]
    assert cm.col_totals.tolist() == [1165, 3856, 2993, 2198, 5060, 1271, 221, 132, 350, 915, 7488, 326, 2214, 860, 7797]


def test_reference_fixture_accuracy(reference_confusion_path):
    cm = load_matrix_csv(reference_confusion_path)
    assert overall_accuracy(cm) == 35610 / 36846
    per = {m.name: m for m in class_metrics(cm)}
    assert per["Water"].producers == 1.0
    assert round(100 * per["Water"].users, 1) == 99.0
    assert round(100 * per["Tomatoes"].producers, 1) == 98.6


def test_reported_percentages_are_truncated_or_rounded(reference_confusion_path):
    # The printed table mixes truncation and rounding; each entry must be one of the two.
    per = class_metrics(load_matrix_csv(reference_confusion_path))
    for m, pa, ua in zip(per, REPORTED_PA, REPORTED_UA):
        for value, printed in ((m.producers, pa), (m.users, ua)):
            assert printed in (math.floor(100 * value), round(100 * value)), m.name


def test_kappa_against_oracle(reference_confusion_path):
    cm = load_matrix_csv(reference_confusion_path)
    assert abs(cohen_kappa(cm) - kappa_oracle(cm.counts.tolist())) < 1e-12


def test_kappa_hand_example():
    # [[20, 5], [10, 15]]: po = 0.7, pe = (25*30 + 25*20)/2500 = 0.5 -> kappa = 0.4
    cm = ConfusionMatrix.from_counts([[20, 5], [10, 15]])
    assert cohen_kappa(cm) == pytest.approx(0.4, abs=1e-15)
    assert overall_accuracy(cm) == 0.7


def test_kappa_perfect_and_undefined():
    assert cohen_kappa(ConfusionMatrix.from_counts([[3, 0], [0, 4]])) == 1.0
    with pytest.raises(UndefinedMetricError):
        cohen_kappa(ConfusionMatrix.from_counts([[5, 0], [0, 0]]))
    with pytest.raises(UndefinedMetricError):
        cohen_kappa(ConfusionMatrix.empty(3))


def test_undefined_class_metrics():
    per = class_metrics(ConfusionMatrix.from_counts([[2, 0], [0, 0]]))
    assert per[1].producers is None and per[1].users is None
    with pytest.raises(UndefinedMetricError):
        overall_accuracy(ConfusionMatrix.empty(2))


def test_accumulate_and_merge():
    cm = confusion_from_labels([0, 1, 1, 2], [0, 1, 2, 2], 3)
    assert cm.counts.tolist() == [[1, 0, 0], [0, 1, 1], [0, 0, 1]]
    confusion_accumulate(cm, [2], [0])
    assert cm.counts[2, 0] == 1
    merged = cm.merge(cm)
    assert merged.total == 2 * cm.total
    with pytest.raises(DataError):
        confusion_accumulate(cm, [3], [0])
    with pytest.raises(DataError):
        confusion_accumulate(cm, [0, 1], [0])
    with pytest.raises(DataError):
        cm.merge(ConfusionMatrix.empty(4))


def test_from_counts_validation():
    with pytest.raises(DataError):
        ConfusionMatrix.from_counts([[1, 2, 3]])
    with pytest.raises(DataError):
        ConfusionMatrix.from_counts([[1, -1], [0, 1]])
    with pytest.raises(DataError):
        ConfusionMatrix.empty(2, ["a"])


def test_report_text(reference_confusion_path):
    text = render_report(load_matrix_csv(reference_confusion_path))
    assert "OA = 0.96645" in text
    assert "kappa = 0.96130" in text
    water = next(line for line in text.splitlines() if line.startswith("Water"))
    assert water.split()[-2:] == ["906", "100%"]


def test_csv_roundtrip(reference_confusion_path):
    cm = load_matrix_csv(reference_confusion_path)
    text = render_csv(cm)
    back = parse_matrix_csv(text)
    assert np.array_equal(back.counts, cm.counts) and back.class_names == cm.class_names
    lines = text.splitlines()
    assert lines[-2].startswith("OA,") and lines[-1].startswith("kappa,")


def test_csv_errors():
    with pytest.raises(FormatError):
        parse_matrix_csv("")
    with pytest.raises(FormatError):
        parse_matrix_csv("class,a,b\na,1,2\n")
    with pytest.raises(FormatError):
        parse_matrix_csv("class,a,b\na,1,x\nb,0,1\n")
