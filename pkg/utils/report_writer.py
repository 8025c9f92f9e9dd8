import csv
import json
import math
from pathlib import Path


def clean_json(value):
    """JSON has no NaN: undefined entries are written as null"""
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {k: clean_json(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [clean_json(v) for v in value]
    return value


def dumps_json(payload) -> str:
    return json.dumps(clean_json(payload), indent=2, sort_keys=True)


def write_json(path, payload) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps_json(payload) + '\n', encoding='utf-8')
    return path


def read_json(path):
    return json.loads(Path(path).read_text(encoding='utf-8'))


def write_csv(path, header, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open('w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(header)
        for row in rows:
            writer.writerow(['' if v is None or (isinstance(v, float) and math.isnan(v)) else v for v in row])
    return path


def write_matrix_csv(path, labels, matrix) -> Path:
    """Square matrix with task labels on both axes"""
    rows = [[label] + [float(v) for v in row] for label, row in zip(labels, matrix)]
    return write_csv(path, ['task'] + list(labels), rows)


def write_predictions_csv(path, task_ids, records) -> Path:
    """image_id, mode, one score and one weight column per head, then q_hat"""
    header = (['image_id', 'mode'] + [f'score_{t}' for t in task_ids]
              + [f'weight_{t}' for t in task_ids] + ['q_hat'])
    rows = [[r.image_id, r.mode] + [float(v) for v in r.scores] + [float(v) for v in r.weights] + [r.q_hat]
            for r in records]
    return write_csv(path, header, rows)
