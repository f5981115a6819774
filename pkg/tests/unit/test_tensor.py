"""Unit tests for Tensor2D and its binary format."""

import struct
import unittest

import numpy as np
from hypothesis import given
from hypothesis import strategies as st

from scene_fusion.errors import NonFiniteError, ParseError
from scene_fusion.tensor import TENSOR_MAGIC, Precision, Tensor2D, stack_rows


class TestTensor2D(unittest.TestCase):
    def test_from_rows_defaults_to_test_precision(self):
        t = Tensor2D.from_rows([[1, 2], [3, 4]])
        self.assertEqual(t.shape, (2, 2))
        self.assertIs(t.precision, Precision.TEST)
        self.assertEqual(t.flat.tolist(), [1.0, 2.0, 3.0, 4.0])

    def test_values_are_read_only(self):
        t = Tensor2D.zeros(2, 2)
        with self.assertRaises(ValueError):
            t.data[0, 0] = 1.0

    def test_source_array_is_copied(self):
        source = np.ones((2, 2))
        t = Tensor2D(source)
        source[0, 0] = 5.0
        self.assertEqual(t.data[0, 0], 1.0)

    def test_rejects_non_finite(self):
        with self.assertRaises(NonFiniteError):
            Tensor2D(np.array([[1.0, np.nan]]))
        with self.assertRaises(NonFiniteError):
            Tensor2D(np.array([[np.inf]]))

    def test_rejects_empty_and_non_2d(self):
        with self.assertRaises(ValueError):
            Tensor2D(np.zeros((0, 3)))
        with self.assertRaises(ValueError):
            Tensor2D(np.zeros(3))

    def test_astype_switches_precision(self):
        t = Tensor2D.eye(3, Precision.TEST)
        low = t.astype(Precision.DEFAULT)
        self.assertEqual(low.data.dtype, np.float32)
        self.assertIs(t.astype(Precision.TEST), t)

    def test_bit_equal_distinguishes_precision(self):
        a = Tensor2D.full(1, 2, 0.5, Precision.TEST)
        b = Tensor2D.full(1, 2, 0.5, Precision.DEFAULT)
        self.assertTrue(a.bit_equal(Tensor2D.full(1, 2, 0.5, Precision.TEST)))
        self.assertFalse(a.bit_equal(b))
        self.assertTrue(a.allclose(b.astype(Precision.TEST)))

    def test_stack_rows(self):
        out = stack_rows([Tensor2D.from_rows([[1, 2]]), Tensor2D.from_rows([[3, 4], [5, 6]])])
        self.assertEqual(out.to_list(), [[1, 2], [3, 4], [5, 6]])


class TestBinaryFormat(unittest.TestCase):
    def test_header_layout(self):
        payload = Tensor2D.from_rows([[1.5, -2.0, 3.0]]).to_bytes()
        magic, rows, cols, tag = struct.unpack_from("<4sIIB", payload)
        self.assertEqual((magic, rows, cols, tag), (TENSOR_MAGIC, 1, 3, 0))
        self.assertEqual(len(payload), 13 + 3 * 8)
        self.assertEqual(struct.unpack_from("<3d", payload, 13), (1.5, -2.0, 3.0))

    def test_default_precision_uses_four_byte_values(self):
        payload = Tensor2D.zeros(2, 2, Precision.DEFAULT).to_bytes()
        self.assertEqual(payload[12], 1)
        self.assertEqual(len(payload), 13 + 4 * 4)

    def test_decode_reports_next_offset(self):
        first = Tensor2D.from_rows([[1, 2]])
        second = Tensor2D.from_rows([[3], [4]], Precision.DEFAULT)
        payload = first.to_bytes() + second.to_bytes()
        a, offset = Tensor2D.from_bytes(payload)
        b, end = Tensor2D.from_bytes(payload, offset)
        self.assertTrue(a.bit_equal(first))
        self.assertTrue(b.bit_equal(second))
        self.assertEqual(end, len(payload))

    def test_bad_magic(self):
        payload = b"XXXX" + Tensor2D.zeros(1, 1).to_bytes()[4:]
        with self.assertRaises(ParseError):
            Tensor2D.from_bytes(payload)

    def test_truncated_values(self):
        payload = Tensor2D.zeros(2, 2).to_bytes()
        with self.assertRaises(ParseError):
            Tensor2D.from_bytes(payload[:-1])
        with self.assertRaises(ParseError):
            Tensor2D.from_bytes(payload[:5])

    def test_unknown_precision_tag(self):
        payload = bytearray(Tensor2D.zeros(1, 1).to_bytes())
        payload[12] = 9
        with self.assertRaises(ParseError):
            Tensor2D.from_bytes(bytes(payload))


@given(
    rows=st.integers(1, 6),
    cols=st.integers(1, 6),
    seed=st.integers(0, 2**32 - 1),
    precision=st.sampled_from(list(Precision)),
)
def test_binary_format_is_lossless(rows, cols, seed, precision):
    values = np.random.default_rng(seed).normal(size=(rows, cols)).astype(precision.dtype)
    tensor = Tensor2D(values)
    decoded, end = Tensor2D.from_bytes(tensor.to_bytes())
    assert decoded.bit_equal(tensor)
    assert end == len(tensor.to_bytes())
