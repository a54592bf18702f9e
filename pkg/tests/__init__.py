from . import analysis_tests
from . import cli_tests
from . import datasets_tests
from . import design_tests
from . import network_tests
from . import randmat_tests
from . import topology_tests
