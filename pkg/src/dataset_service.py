"""
Dataset Service Module
- Loads the four MNIST-family image classification datasets from IDX files.
- Fetches the files from their public mirrors with checksum verification.
"""

import hashlib
import json
import logging
import os
import tempfile
import time
import zipfile
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np
import requests

import settings
from errors import (
    ChecksumMismatch,
    DownloadFailed,
    IdxFormatError,
    MissingFile,
    SplitSizeMismatch,
    UnknownDataset,
)
from idx_parser import IMAGES_MAGIC, LABELS_MAGIC, read_idx_file

IMAGE_SIDE = 28
PIXELS = IMAGE_SIDE * IMAGE_SIDE
PIXEL_SCALE = 255.0

# md5 of archive members recorded after a verified extraction
EXTRACTED_CHECKSUMS = "extracted_md5.json"


@dataclass(frozen=True)
class DatasetInfo:
    name: str
    train_images: str
    train_labels: str
    test_images: str
    test_labels: str
    class_count: int
    train_size: int
    test_size: int
    transpose: bool = False
    label_offset: int = 0

    @property
    def files(self) -> Tuple[str, str, str, str]:
        return (self.train_images, self.train_labels, self.test_images, self.test_labels)


_MNIST_FILES = (
    "train-images-idx3-ubyte.gz",
    "train-labels-idx1-ubyte.gz",
    "t10k-images-idx3-ubyte.gz",
    "t10k-labels-idx1-ubyte.gz",
)

DATASETS: Dict[str, DatasetInfo] = {
    "mnist": DatasetInfo("mnist", *_MNIST_FILES, class_count=10, train_size=60000, test_size=10000),
    "fashion-mnist": DatasetInfo(
        "fashion-mnist", *_MNIST_FILES, class_count=10, train_size=60000, test_size=10000
    ),
    "kmnist": DatasetInfo("kmnist", *_MNIST_FILES, class_count=10, train_size=60000, test_size=10000),
    # EMNIST stores images transposed and letters labelled 1..26
    "emnist-letters": DatasetInfo(
        "emnist-letters",
        "emnist-letters-train-images-idx3-ubyte.gz",
        "emnist-letters-train-labels-idx1-ubyte.gz",
        "emnist-letters-test-images-idx3-ubyte.gz",
        "emnist-letters-test-labels-idx1-ubyte.gz",
        class_count=26,
        train_size=124800,
        test_size=20800,
        transpose=True,
        label_offset=1,
    ),
}


@dataclass(frozen=True)
class LabeledImageSet:
    """Flattened 28x28 grayscale images in [0,1] with integer labels in [0, class_count)."""

    images: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        if self.images.ndim != 2 or self.images.shape[1] != PIXELS:
            raise IdxFormatError(f"Expected N x {PIXELS} images, got shape {self.images.shape}")
        if len(self.images) == 0 or len(self.images) != len(self.labels):
            raise IdxFormatError(
                f"Images and labels must be non-empty and equally long, got {len(self.images)} and {len(self.labels)}"
            )
        if self.images.min() < 0.0 or self.images.max() > 1.0:
            raise IdxFormatError("Pixel values must lie in [0, 1]")
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise IdxFormatError(f"Labels must lie in [0, {self.class_count})")
        self.images.setflags(write=False)
        self.labels.setflags(write=False)

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, indices) -> "LabeledImageSet":
        indices = np.asarray(indices)
        return LabeledImageSet(self.images[indices].copy(), self.labels[indices].copy(), self.class_count)

    def head(self, limit: Optional[int]) -> "LabeledImageSet":
        if limit is None or limit >= len(self):
            return self
        return self.subset(np.arange(limit))

    def label_histogram(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.class_count)


def get_dataset_info(name: str) -> DatasetInfo:
    info = DATASETS.get(name)
    if info is None:
        raise UnknownDataset(f"Unknown dataset '{name}', expected one of {sorted(DATASETS)}")
    return info


def _locate(directory: str, filename: str) -> str:
    """Find a dataset file with or without its .gz suffix."""
    candidates = [filename]
    if filename.endswith(".gz"):
        candidates.append(filename[: -len(".gz")])
    for candidate in candidates:
        path = os.path.join(directory, candidate)
        if os.path.exists(path):
            return path
    raise MissingFile(f"Dataset file {filename} not found in {directory}")


def _load_split(info: DatasetInfo, directory: str, images_file: str, labels_file: str) -> LabeledImageSet:
    images_idx = read_idx_file(_locate(directory, images_file))
    labels_idx = read_idx_file(_locate(directory, labels_file))

    if images_idx.magic != IMAGES_MAGIC or images_idx.dims[1:] != (IMAGE_SIDE, IMAGE_SIDE):
        raise IdxFormatError(f"{images_file} is not a 28x28 image file (dims {images_idx.dims})")
    if labels_idx.magic != LABELS_MAGIC:
        raise IdxFormatError(f"{labels_file} is not a label file")

    images = images_idx.payload
    if info.transpose:
        images = images.transpose(0, 2, 1)
    images = images.reshape(len(images), PIXELS).astype(np.float64) / PIXEL_SCALE
    labels = labels_idx.payload.astype(np.int64) - info.label_offset
    return LabeledImageSet(images=images, labels=labels, class_count=info.class_count)


def load_dataset(name: str, root: Optional[str] = None, strict: bool = True) -> Tuple[LabeledImageSet, LabeledImageSet]:
    """
    Load the train and test split of a dataset.
    :param name: One of mnist, fashion-mnist, kmnist, emnist-letters.
    :param root: Directory holding one sub-directory per dataset.
    :param strict: Require the official split sizes.
    :return: (train, test) LabeledImageSets.
    """
    info = get_dataset_info(name)
    directory = os.path.join(root or settings.DATA_ROOT, name)
    logging.info(f"Loading dataset {name} from {directory}")

    train = _load_split(info, directory, info.train_images, info.train_labels)
    test = _load_split(info, directory, info.test_images, info.test_labels)

    if strict and (len(train) != info.train_size or len(test) != info.test_size):
        raise SplitSizeMismatch(
            f"{name}: expected {info.train_size}/{info.test_size} samples, got {len(train)}/{len(test)}"
        )

    logging.info(f"Loaded {name}: train N={len(train)}, test N={len(test)}, classes={info.class_count}")
    return train, test


def load_manifest(path: Optional[str] = None) -> Dict[str, dict]:
    with open(path or settings.CHECKSUM_MANIFEST, "r") as handle:
        return json.load(handle)


def file_md5(path: str) -> str:
    digest = hashlib.md5()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _download(url: str, retries: int, retry_delay: float, timeout: float) -> bytes:
    """Download a URL with the retry loop, raising DownloadFailed after the last attempt."""
    for attempt in range(retries):
        try:
            logging.info(f"Downloading {url} (attempt {attempt + 1} of {retries})")
            response = requests.get(url, timeout=timeout)
            response.raise_for_status()
            return response.content
        except requests.exceptions.RequestException as e:
            logging.error(f"Error downloading {url} on attempt {attempt + 1}: {e}")
            if attempt < retries - 1:
                time.sleep(retry_delay)
    raise DownloadFailed(f"Failed to download {url} after {retries} attempts")


def _write_verified(content: bytes, path: str, expected_md5: Optional[str]) -> None:
    """Write content next to path, verify it, then move it into place."""
    directory = os.path.dirname(path)
    handle, tmp_path = tempfile.mkstemp(dir=directory, suffix=".part")
    try:
        with os.fdopen(handle, "wb") as tmp:
            tmp.write(content)
        if expected_md5 is not None:
            actual = file_md5(tmp_path)
            if actual != expected_md5:
                raise ChecksumMismatch(f"{os.path.basename(path)}: expected md5 {expected_md5}, got {actual}")
        os.replace(tmp_path, path)
    finally:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)


def _is_present(path: str, expected_md5: Optional[str]) -> bool:
    """An existing file counts only when a checksum is known and matches."""
    if expected_md5 is None or not os.path.exists(path):
        return False
    return file_md5(path) == expected_md5


def _read_extracted_checksums(directory: str) -> Dict[str, str]:
    path = os.path.join(directory, EXTRACTED_CHECKSUMS)
    if not os.path.exists(path):
        return {}
    with open(path, "r") as handle:
        return json.load(handle)


def _write_extracted_checksums(directory: str, checksums: Dict[str, str]) -> None:
    with open(os.path.join(directory, EXTRACTED_CHECKSUMS), "w") as handle:
        json.dump(checksums, handle, indent=2, sort_keys=True)


def fetch_dataset(
    name: str,
    root: Optional[str] = None,
    mirror_url: Optional[str] = None,
    manifest_path: Optional[str] = None,
    retries: Optional[int] = None,
    retry_delay: Optional[float] = None,
) -> Dict[str, str]:
    """
    Download the four IDX files of a dataset and verify them against the pinned checksums.
    Files that are already present with the right checksum are not downloaded again.
    :return: Mapping of file name to local path.
    """
    get_dataset_info(name)
    manifest = load_manifest(manifest_path)
    if name not in manifest:
        raise UnknownDataset(f"No checksum manifest entry for dataset '{name}'")
    entry = manifest[name]

    mirror = mirror_url or settings.DATASET_MIRROR or entry["mirror"]
    if not mirror.endswith("/"):
        mirror += "/"
    retries = settings.DOWNLOAD_RETRIES if retries is None else retries
    retry_delay = settings.RETRY_DELAY if retry_delay is None else retry_delay

    directory = os.path.join(root or settings.DATA_ROOT, name)
    os.makedirs(directory, exist_ok=True)
    paths = {filename: os.path.join(directory, filename) for filename in entry["files"]}
    # members without a pinned checksum are checked against the one recorded at extraction
    extracted = _read_extracted_checksums(directory)
    expected = {filename: md5 or extracted.get(filename) for filename, md5 in entry["files"].items()}

    missing = [f for f, md5 in expected.items() if not _is_present(paths[f], md5)]
    if not missing:
        logging.info(f"Dataset {name} already present and verified in {directory}")
        return paths

    archive = entry.get("archive")
    if archive:
        # EMNIST ships as one zip; the archive checksum covers its members
        content = _download(mirror + archive["name"], retries, retry_delay, settings.DOWNLOAD_TIMEOUT)
        archive_path = os.path.join(directory, archive["name"])
        _write_verified(content, archive_path, archive.get("md5"))
        with zipfile.ZipFile(archive_path) as zf:
            for filename in missing:
                member = archive.get("member_prefix", "") + filename
                logging.info(f"Extracting {member} from {archive['name']}")
                _write_verified(zf.read(member), paths[filename], entry["files"][filename])
                extracted[filename] = file_md5(paths[filename])
        os.remove(archive_path)
        _write_extracted_checksums(directory, extracted)
    else:
        for filename in missing:
            content = _download(mirror + filename, retries, retry_delay, settings.DOWNLOAD_TIMEOUT)
            _write_verified(content, paths[filename], entry["files"][filename])
            logging.info(f"Stored verified file {paths[filename]}")

    logging.info(f"Dataset {name} fetched: {len(missing)} files downloaded")
    return paths
