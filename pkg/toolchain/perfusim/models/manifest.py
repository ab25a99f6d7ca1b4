# Copyright (C) 2026 The perfusim developers
#
# This file is part of perfusim
#
# perfusim is free software: you can redistribute it and/or modify it
# under the terms of the GNU General Public License as published by the Free
# Software Foundation; either version 3 of the License, or (at your option) any
# later version.
#
# This program is distributed in the hope that it will be useful, but WITHOUT
# ANY WARRANTY; without even the implied warranty of MERCHANTABILITY or FITNESS
# FOR A PARTICULAR PURPOSE. See the GNU General Public License for more
# details.
#
# You should have received a copy of the GNU General Public License along with
# this program. If not, see <http://www.gnu.org/licenses/>.

import hashlib
from pydantic import BaseModel, Field
from typing import List


class Artifact(BaseModel):
    stage: str
    path: str = Field(title='Path relative to the output directory')
    sha256: str

    @classmethod
    def from_file(cls, stage: str, root, relpath: str) -> 'Artifact':
        with open(f'{root}/{relpath}', 'rb') as fh:
            digest = hashlib.sha256(fh.read()).hexdigest()
        return cls(stage=stage, path=relpath, sha256=digest)


class Manifest(BaseModel):
    version: str
    config_hash: str
    seed: int
    stages: List[str] = Field(default_factory=list, title='Stages that ran, in order')
    artifacts: List[Artifact] = Field(default_factory=list)

    def digest(self, path: str) -> str:
        for a in self.artifacts:
            if a.path == path:
                return a.sha256
        raise KeyError(path)
