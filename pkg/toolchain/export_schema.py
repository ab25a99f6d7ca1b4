# Regenerate after changing any configuration model

import os
import ujson

from perfusim.models import PipelineConfig

target = os.environ.get('PERFUSIM_SCHEMA_PATH')
if target is None:
    target = os.path.join(os.path.dirname(os.path.abspath(__file__)), '..', 'docs', 'config.schema.json')

schema = PipelineConfig.model_json_schema(by_alias=True)
os.makedirs(os.path.dirname(os.path.abspath(target)), exist_ok=True)
with open(target, 'w', newline='\n') as fh:
    fh.write(ujson.dumps(schema, sort_keys=True, indent=2))
    fh.write('\n')
