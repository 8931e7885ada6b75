"""Named scalar channels sampled in time, with a plain CSV round trip."""

import csv

import numpy as np


class TimeSeries:
    def __init__(self, channels):
        self.channels = tuple(channels)
        self._rows = []

    def __len__(self):
        return len(self._rows)

    def append(self, sample):
        missing = set(self.channels) - set(sample)
        if missing:
            raise ValueError(f"sample lacks channels {sorted(missing)}")
        self._rows.append([float(sample[c]) for c in self.channels])

    def __getitem__(self, name):
        if name not in self.channels:
            raise KeyError(name)
        k = self.channels.index(name)
        return np.array([row[k] for row in self._rows])

    @property
    def t(self):
        return self["t"]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            fh.write(",".join(self.channels) + "\n")
            for row in self._rows:
                fh.write(",".join("%.17g" % x for x in row) + "\n")

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            ts = cls(header)
            for row in reader:
                ts._rows.append([float(x) for x in row])
        return ts
