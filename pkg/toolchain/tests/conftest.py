from .fixtures.phantoms import sphere_spec, sphere_grid, sphere_mask, small_sphere_mask, random_masks
from .fixtures.meshes import single_tet, regular_tet, box3, box4
from .fixtures.trees import single_pipe, bifurcation, asymmetric_tree, two_level_tree
