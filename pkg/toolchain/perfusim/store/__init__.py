from .jsonfile import write_json, read_json, save_model, load_model, save_tree, load_tree, load_seeds, \
    load_flow_boundary
from .vtk import write_polydata, write_unstructured_grid
