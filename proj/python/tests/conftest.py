import os
import sys

# Under ctest, test the extension from the CMake build tree rather than any
# installed (possibly editable) copy.
_tree = os.environ.get("NORMSHAPE_PY_TREE")
if _tree:
    sys.path.insert(0, _tree)
    sys.meta_path[:] = [f for f in sys.meta_path if "editable" not in type(f).__module__]
