from setuptools import find_packages, setup
from distutils.util import convert_path

version_path = convert_path('toolchain/perfusim/version.py')
namespace = {}
with open(version_path) as ver_file:
    exec(ver_file.read(), namespace)

setup(
    name='perfusim',
    version=namespace['__version__'],
    package_dir={
        '': 'toolchain'
    },
    packages=find_packages('toolchain', exclude=['tests', 'tests.*']),
    package_data={
        'perfusim': ['configs/*.json']
    },
    entry_points={
        'console_scripts': ['perfusim=perfusim.cli:cli']
    },
    license='GNU General Public License v3.0',
    description='Liver perfusion toolchain: segmentation, meshing, vascular trees, '
                'coupled 1D/3D perfusion and contrast transport',
    python_requires='>=3.9',
    install_requires=[
        'networkx>=2.8',
        'numpy>=1.22',
        'pydantic>=2',
        'scikit-image>=0.19',
        'scipy>=1.12',
        'ujson'
    ],
    tests_require=[
        'pytest'
    ]
)
