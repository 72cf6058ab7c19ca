"""Regenerates the tiny ONNX fixtures used by the seg_backend tests.

    python3 make_fixtures.py

Requires the `onnx` package. Outputs are committed; rerun only when the
fixture contract changes, then refresh the golden hashes in the tests.
"""

import numpy as np
import onnx
from onnx import TensorProto, helper, numpy_helper


def conv_model(name, in_shape, out_shape, weights, bias):
    w = numpy_helper.from_array(np.asarray(weights, dtype=np.float32).reshape(1, 3, 1, 1), "w")
    b = numpy_helper.from_array(np.asarray([bias], dtype=np.float32), "b")
    node = helper.make_node("Conv", ["input", "w", "b"], ["logits"], kernel_shape=[1, 1])
    graph = helper.make_graph(
        [node],
        name,
        [helper.make_tensor_value_info("input", TensorProto.FLOAT, in_shape)],
        [helper.make_tensor_value_info("logits", TensorProto.FLOAT, out_shape)],
        initializer=[w, b],
    )
    model = helper.make_model(graph, opset_imports=[helper.make_opsetid("", 13)], producer_name="dce-kit-fixtures")
    model.ir_version = 8
    onnx.checker.check_model(model)
    return model


def two_input_model():
    node = helper.make_node("Add", ["input", "other"], ["logits"])
    graph = helper.make_graph(
        [node],
        "two_inputs",
        [
            helper.make_tensor_value_info("input", TensorProto.FLOAT, [1, 3, 256, 256]),
            helper.make_tensor_value_info("other", TensorProto.FLOAT, [1, 3, 256, 256]),
        ],
        [helper.make_tensor_value_info("logits", TensorProto.FLOAT, [1, 3, 256, 256])],
    )
    model = helper.make_model(graph, opset_imports=[helper.make_opsetid("", 13)], producer_name="dce-kit-fixtures")
    model.ir_version = 8
    onnx.checker.check_model(model)
    return model


if __name__ == "__main__":
    # Early-enhancement detector: bright G relative to R and B pushes the logit up.
    onnx.save(conv_model("tiny_enhancement", [1, 3, 256, 256], [1, 1, 256, 256], [-4.0, 10.0, -2.0], -2.0), "tiny_seg.onnx")
    onnx.save(conv_model("wrong_size", [1, 3, 128, 128], [1, 1, 128, 128], [0.0, 1.0, 0.0], 0.0), "wrong_input_shape.onnx")
    onnx.save(two_input_model(), "two_inputs.onnx")
