import numpy as np
import pytest

from attnconv.convform import KernelBank, SelectionRule, load_kernel_bank, save_kernel_bank
from attnconv.errors import FormatError
from attnconv.tensor import Tensor
from attnconv.tensor_io import load_tensor, save_tensor


class TestTenFormat:
    @pytest.mark.parametrize("shape", [(), (1,), (5,), (3, 4), (2, 3, 4, 5)])
    def test_roundtrip_bitwise(self, rng, shape, tmp_path):
        t = Tensor(rng.standard_normal(shape))
        path = tmp_path / "t.ten"
        save_tensor(t, path)
        back = load_tensor(path)
        assert back.shape == t.shape
        assert np.array_equal(back.data, t.data)

    def test_header_layout(self, tmp_path):
        path = tmp_path / "t.ten"
        save_tensor(Tensor([[1.0, 2.0]]), path)
        blob = path.read_bytes()
        # rank u32 = 2, extents 1 and 2, then 2 float64 values
        assert blob[:12] == (2).to_bytes(4, "little") + (1).to_bytes(4, "little") \
            + (2).to_bytes(4, "little")
        assert len(blob) == 12 + 16

    def test_truncated_file_reports_offset(self, tmp_path):
        path = tmp_path / "t.ten"
        save_tensor(Tensor(np.arange(6.0).reshape(2, 3)), path)
        path.write_bytes(path.read_bytes()[:20])
        with pytest.raises(FormatError, match="byte offset"):
            load_tensor(path)

    def test_empty_file(self, tmp_path):
        path = tmp_path / "t.ten"
        path.write_bytes(b"")
        with pytest.raises(FormatError):
            load_tensor(path)


class TestKernelBankSidecar:
    def test_roundtrip_with_rule(self, rng, tmp_path):
        bank = KernelBank(Tensor(rng.standard_normal((16, 8))),
                          Tensor(rng.standard_normal((16, 8))))
        rule = SelectionRule.local(2, 2, 4, 4)
        save_kernel_bank(bank, tmp_path / "bank", rule=rule)
        back, back_rule = load_kernel_bank(tmp_path / "bank")
        assert np.array_equal(back.key_kernels.data, bank.key_kernels.data)
        assert np.array_equal(back.value_kernels.data, bank.value_kernels.data)
        assert np.array_equal(back.origins, bank.origins)
        assert back_rule.kind == "local_window"
        assert back_rule.window == (2, 2) and back_rule.grid == (4, 4)
