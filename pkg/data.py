"""
data.py - Dataset recipes, CSV ingestion and the half-normal train/validation split

A recipe (recipes/*.recipe, KEY=value syntax) names the source file(s) and
says which columns are continuous, categorical, dropped, and which label values
mark anomalies. make_split() then builds:
- train: a random half of the normal rows
- val: the other normal rows plus every anomaly, with labels (1 = anomaly)
Continuous features are z-scored with train statistics; one-hot columns stay 0/1.
"""

import logging
import math
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from dotenv import dotenv_values
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from sklearn.preprocessing import StandardScaler

from errors import DataError, ParseError, RecipeError, SchemaError
from numeric import Rng

logger = logging.getLogger(__name__)

DATA_DIR_ENV = "INFLUENCE_AD_DATA_DIR"


def parse_index_list(text) -> Tuple[int, ...]:
    """'0,3-5, 9' -> (0, 3, 4, 5, 9)"""
    if text is None:
        return ()
    if isinstance(text, (list, tuple)):
        return tuple(int(v) for v in text)
    indices = []
    for part in str(text).split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part:
            low, high = part.split("-", 1)
            indices.extend(range(int(low), int(high) + 1))
        else:
            indices.append(int(part))
    return tuple(indices)


def parse_value_list(text) -> Tuple[str, ...]:
    if text is None:
        return ()
    if isinstance(text, (list, tuple)):
        return tuple(str(v).strip() for v in text)
    return tuple(v.strip() for v in str(text).split(",") if v.strip())


# =========================================================================
# RECIPES
# =========================================================================

class DatasetRecipe(BaseModel):
    """How to turn one benchmark's raw files into labelled rows"""

    model_config = ConfigDict(frozen=True)

    name: str
    sources: Tuple[str, ...]
    columns: int = Field(ge=2)
    delimiter: str = ","
    label_column: int
    continuous: Tuple[int, ...] = ()
    categorical: Tuple[int, ...] = ()
    dropped: Tuple[int, ...] = ()
    anomaly_labels: Tuple[str, ...] = ()
    normal_labels: Tuple[str, ...] = ()
    anomaly_ratio_to_normal: Optional[float] = Field(default=None, gt=0)
    missing_marker: str = "?"
    missing_column_threshold: float = Field(default=0.5, ge=0, le=1)

    @field_validator("continuous", "categorical", "dropped", mode="before")
    @classmethod
    def _indices(cls, value):
        return parse_index_list(value)

    @field_validator("sources", "anomaly_labels", "normal_labels", mode="before")
    @classmethod
    def _values(cls, value):
        return parse_value_list(value)

    @field_validator("anomaly_ratio_to_normal", mode="before")
    @classmethod
    def _optional_ratio(cls, value):
        return None if value in (None, "") else value

    @model_validator(mode="after")
    def _check_schema(self):
        groups = {
            "continuous": set(self.continuous),
            "categorical": set(self.categorical),
            "dropped": set(self.dropped),
            "label": {self.label_column},
        }
        names = list(groups)
        for i, a in enumerate(names):
            for b in names[i + 1:]:
                overlap = groups[a] & groups[b]
                if overlap:
                    raise ValueError(f"{a} and {b} columns overlap: {sorted(overlap)}")
        covered = set().union(*groups.values())
        expected = set(range(self.columns))
        if covered != expected:
            missing = sorted(expected - covered)
            extra = sorted(covered - expected)
            raise ValueError(f"column groups must cover 0..{self.columns - 1} exactly "
                             f"(uncovered: {missing[:10]}, out of range: {extra[:10]})")
        if bool(self.anomaly_labels) == bool(self.normal_labels):
            raise ValueError("set exactly one of anomaly_labels / normal_labels")
        if not self.sources:
            raise ValueError("recipe names no source file")
        return self

    @classmethod
    def from_file(cls, path, data_dir: Optional[str] = None) -> "DatasetRecipe":
        """
        Parse a KEY=value recipe file.

        Relative source paths are resolved against data_dir, then the
        INFLUENCE_AD_DATA_DIR environment variable, then the recipe's directory.
        """
        path = Path(path)
        if not path.is_file():
            raise DataError("recipe file not found", path=str(path))
        raw = {k.lower(): v for k, v in dotenv_values(path).items() if v is not None}
        base = Path(data_dir or os.environ.get(DATA_DIR_ENV) or path.parent)
        sources = [Path(s) for s in parse_value_list(raw.get("sources", raw.get("source")))]
        raw["sources"] = tuple(str(s if s.is_absolute() else base / s) for s in sources)
        raw.pop("source", None)
        try:
            return cls(**raw)
        except ValidationError as e:
            raise RecipeError(f"invalid recipe: {e.errors()[0]['msg']}", path=str(path))

    def is_anomaly(self, labels: pd.Series) -> np.ndarray:
        if self.anomaly_labels:
            return labels.isin(self.anomaly_labels).to_numpy()
        return (~labels.isin(self.normal_labels)).to_numpy()


@dataclass
class RawTable:
    """Typed rows of one recipe: feature columns keyed by original column index"""

    features: pd.DataFrame
    labels: pd.Series
    continuous: List[int]
    categorical: List[int]
    dropped_rows: int = 0
    dropped_columns: List[int] = field(default_factory=list)

    @property
    def n_rows(self) -> int:
        return len(self.labels)


def _line_from_parser_error(message: str) -> Optional[int]:
    match = re.search(r"line (\d+)", message)
    return int(match.group(1)) if match else None


def _read_source(path: str, recipe: DatasetRecipe) -> pd.DataFrame:
    if not Path(path).is_file():
        raise DataError("source file not found", path=path)
    sep = r"\s+" if recipe.delimiter == "whitespace" else recipe.delimiter
    try:
        frame = pd.read_csv(
            path,
            header=None,
            sep=sep,
            dtype=str,
            na_values=[recipe.missing_marker],
            keep_default_na=False,
            skipinitialspace=True,
            engine="c",
        )
    except pd.errors.EmptyDataError:
        raise SchemaError("source file is empty", path=path, line=1)
    except pd.errors.ParserError as e:
        raise SchemaError(f"wrong column count: {e}", path=path, line=_line_from_parser_error(str(e)))
    if frame.empty:
        raise SchemaError("source file is empty", path=path, line=1)
    if frame.shape[1] != recipe.columns:
        raise SchemaError(f"expected {recipe.columns} columns, found {frame.shape[1]}", path=path, line=1)
    short = frame[recipe.label_column].isna() | (frame[recipe.label_column].str.strip() == "")
    if short.any():
        line = int(np.flatnonzero(short.to_numpy())[0]) + 1
        raise SchemaError(f"expected {recipe.columns} columns", path=path, line=line)
    frame["_source"] = path
    frame["_line"] = np.arange(1, len(frame) + 1)
    return frame


def load_recipe(recipe: DatasetRecipe) -> RawTable:
    """
    Read and type the recipe's source files.

    Missing values: a feature column more than `missing_column_threshold` empty is
    dropped, otherwise rows with a missing value are dropped. Both counts are logged.
    """
    frame = pd.concat([_read_source(p, recipe) for p in recipe.sources], ignore_index=True)
    logger.info(f"📥 [{recipe.name}] {len(frame)} rows read from {len(recipe.sources)} file(s)")

    continuous = list(recipe.continuous)
    categorical = list(recipe.categorical)
    dropped_columns = []
    for col in continuous + categorical:
        missing = frame[col].isna().mean()
        if missing > recipe.missing_column_threshold:
            dropped_columns.append(col)
    if dropped_columns:
        logger.warning(f"⚠️ [{recipe.name}] dropping {len(dropped_columns)} mostly-missing columns: {dropped_columns}")
        continuous = [c for c in continuous if c not in dropped_columns]
        categorical = [c for c in categorical if c not in dropped_columns]

    incomplete = frame[continuous + categorical].isna().any(axis=1)
    dropped_rows = int(incomplete.sum())
    if dropped_rows:
        logger.warning(f"⚠️ [{recipe.name}] dropping {dropped_rows} rows with missing values")
        frame = frame.loc[~incomplete].reset_index(drop=True)

    features = pd.DataFrame(index=frame.index)
    for col in continuous:
        values = pd.to_numeric(frame[col].str.strip(), errors="coerce")
        bad = values.isna().to_numpy()
        if bad.any():
            row = int(np.flatnonzero(bad)[0])
            raise ParseError(f"column {col}: cannot parse {frame[col].iloc[row]!r} as a number",
                             path=frame["_source"].iloc[row], line=int(frame["_line"].iloc[row]))
        features[col] = values.astype(np.float64)
    for col in categorical:
        features[col] = frame[col].str.strip()

    labels = frame[recipe.label_column].str.strip()
    logger.info(f"✅ [{recipe.name}] {len(frame)} rows kept, {len(continuous)} continuous + "
                f"{len(categorical)} categorical attributes")
    return RawTable(features, labels, continuous, categorical, dropped_rows, dropped_columns)


# =========================================================================
# SPLIT
# =========================================================================

@dataclass
class DatasetSplit:
    name: str
    seed: int
    train: np.ndarray
    val: np.ndarray
    val_labels: np.ndarray
    means: np.ndarray
    stds: np.ndarray
    feature_names: List[str]
    train_index: np.ndarray
    val_index: np.ndarray

    @property
    def dim(self) -> int:
        return self.train.shape[1]

    @property
    def rho(self) -> float:
        """Share of anomalies in the validation set"""
        return float(self.val_labels.mean())

    def summary(self) -> str:
        return f"train={self.train.shape[0]} val={self.val.shape[0]} d={self.dim} rho={self.rho:.3f}"

    def metadata(self) -> Dict:
        return {
            "name": self.name,
            "seed": self.seed,
            "means": self.means.tolist(),
            "stds": self.stds.tolist(),
            "feature_names": list(self.feature_names),
            "train_index": self.train_index.tolist(),
            "val_index": self.val_index.tolist(),
        }

    @classmethod
    def from_metadata(cls, meta: Dict, train: np.ndarray, val: np.ndarray, labels: np.ndarray) -> "DatasetSplit":
        return cls(
            name=meta["name"],
            seed=int(meta["seed"]),
            train=train,
            val=val,
            val_labels=labels,
            means=np.asarray(meta["means"], dtype=np.float64),
            stds=np.asarray(meta["stds"], dtype=np.float64),
            feature_names=list(meta["feature_names"]),
            train_index=np.asarray(meta["train_index"], dtype=np.int64),
            val_index=np.asarray(meta["val_index"], dtype=np.int64),
        )


def _encode_features(table: RawTable) -> Tuple[np.ndarray, np.ndarray, List[str]]:
    """Continuous block and one-hot block, with column names"""
    continuous = table.features[table.continuous].to_numpy(dtype=np.float64)
    names = [f"x{c}" for c in table.continuous]
    if not table.categorical:
        return continuous, np.zeros((table.n_rows, 0)), names
    dummies = pd.get_dummies(table.features[table.categorical].astype(str),
                             columns=table.categorical, prefix=[f"x{c}" for c in table.categorical],
                             dtype=np.float64)
    return continuous, dummies.to_numpy(dtype=np.float64), names + list(dummies.columns)


def make_split(table: RawTable, recipe: DatasetRecipe, seed: int) -> DatasetSplit:
    """
    Half of the normal rows train; the rest of the normals plus all anomalies validate.

    Args:
        table: rows from load_recipe()
        recipe: class definition and optional anomaly subsampling
        seed: drives anomaly subsampling and the normal-row shuffle

    Returns:
        DatasetSplit with z-scored continuous features (train statistics)
    """
    is_anomaly = recipe.is_anomaly(table.labels)
    normal_rows = np.flatnonzero(~is_anomaly)
    anomaly_rows = np.flatnonzero(is_anomaly)
    if anomaly_rows.size == 0:
        raise RecipeError(f"[{recipe.name}] class definition yields no anomalies")
    if normal_rows.size < 2:
        raise RecipeError(f"[{recipe.name}] class definition leaves {normal_rows.size} normal rows")

    rng = Rng(seed).derive("split", recipe.name)
    if recipe.anomaly_ratio_to_normal is not None:
        keep = int(math.floor(recipe.anomaly_ratio_to_normal * normal_rows.size))
        keep = max(1, min(keep, anomaly_rows.size))
        picked = rng.choice(anomaly_rows.size, keep).numpy()
        anomaly_rows = np.sort(anomaly_rows[picked])
        logger.info(f"🎲 [{recipe.name}] anomalies subsampled to {keep} "
                    f"({recipe.anomaly_ratio_to_normal:.0%} of {normal_rows.size} normals)")

    order = rng.permutation(normal_rows.size).numpy()
    n_train = normal_rows.size // 2
    train_index = np.sort(normal_rows[order[:n_train]])
    val_index = np.sort(np.concatenate([normal_rows[order[n_train:]], anomaly_rows]))

    continuous, one_hot, names = _encode_features(table)
    if continuous.shape[1] == 0:
        raise RecipeError(f"[{recipe.name}] recipe keeps no continuous attribute")
    scaler = StandardScaler().fit(continuous[train_index])
    constant = int((scaler.var_ == 0).sum())
    if constant:
        logger.warning(f"⚠️ [{recipe.name}] {constant} constant continuous columns map to 0")

    def transform(rows: np.ndarray) -> np.ndarray:
        return np.hstack([scaler.transform(continuous[rows]), one_hot[rows]])

    labels = is_anomaly[val_index].astype(np.int64)
    split = DatasetSplit(
        name=recipe.name,
        seed=seed,
        train=transform(train_index),
        val=transform(val_index),
        val_labels=labels,
        means=np.asarray(scaler.mean_, dtype=np.float64),
        stds=np.asarray(scaler.scale_, dtype=np.float64),
        feature_names=names,
        train_index=train_index,
        val_index=val_index,
    )
    if not 0.0 < split.rho < 1.0:
        raise RecipeError(f"[{recipe.name}] contamination ratio {split.rho} outside (0, 1)")
    logger.info(f"📊 [{recipe.name}] split: {split.summary()}")
    return split


def prepare_split(recipe: DatasetRecipe, seed: int) -> DatasetSplit:
    return make_split(load_recipe(recipe), recipe, seed)
