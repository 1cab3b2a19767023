import os
import sys

from app.backend.core.config import get_settings
from app.data_processing.synthesis.composer import class_histogram, synthesize_splits, write_dataset
from app.data_processing.synthesis.presets import preset, preset_ids


def main():
    s = get_settings()
    # Список пресетов можно передать аргументами, по умолчанию строим все
    ids = sys.argv[1:] or preset_ids()

    for preset_id in ids:
        cfg = preset(preset_id)
        out_dir = os.path.join(s.DATASETS_DIR, cfg.id)
        splits = synthesize_splits(cfg, s.MNIST_DIR)
        for split, data in splits.items():
            write_dataset(out_dir, cfg, split, data)
            hist = class_histogram(data.labels, cfg.num_classes)
            print(f"{cfg.id} {split}: {len(data.labels)} изображений, "
                  f"на класс от {hist.min()} до {hist.max()}")

    print(f"Датасеты записаны в {s.DATASETS_DIR}")


if __name__ == "__main__":
    main()
