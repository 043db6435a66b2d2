#include <pybind11/pybind11.h>
PYBIND11_MODULE(_hypersyn, m) { m.doc() = "hypersyn"; }
