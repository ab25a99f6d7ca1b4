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

import os
import ujson
from pydantic import BaseModel
from typing import Any, Type, TypeVar

from perfusim.models import FlowBoundary, SeedSet, VascularTree

M = TypeVar('M', bound=BaseModel)


def write_json(payload: Any, path: str):
    'Canonical JSON: sorted keys, fixed indent, trailing newline'
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    with open(path, 'w', newline='\n') as fh:
        fh.write(ujson.dumps(payload, sort_keys=True, indent=2))
        fh.write('\n')


def read_json(path: str) -> Any:
    with open(path) as fh:
        return ujson.load(fh)


def save_model(model: BaseModel, path: str):
    write_json(model.model_dump(mode='json', by_alias=True), path)


def load_model(cls: Type[M], path: str) -> M:
    return cls.model_validate(read_json(path))


def save_tree(tree: VascularTree, path: str):
    save_model(tree, path)


def load_tree(path: str) -> VascularTree:
    return load_model(VascularTree, path)


def load_seeds(path: str) -> SeedSet:
    return load_model(SeedSet, path)


def load_flow_boundary(path: str) -> FlowBoundary:
    return load_model(FlowBoundary, path)
