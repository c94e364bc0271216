#!/usr/bin/python3

import io, os, pathlib, tempfile, unittest

import numpy as np

from natpn import checkpoint
from natpn.model import NatPnConfig, NatPnModel
from natpn.util import CheckpointError


def model(seed=0):
    config = NatPnConfig('normal', 3, latent_dim=2, encoder=[4, 4], flow='maf-2')
    return NatPnModel(config, seed=seed)


class TestCheckpoint(unittest.TestCase):
    def setUp(self):
        self.model = model()
        self.meta = {'seed': 0, 'dataset': 'sine_regression', 'target_stats': {'mean': [0.5], 'std': [2.0]}}
        self.data = checkpoint.dumps(self.model, self.meta)

    def test_round_trip(self):
        ckpt = checkpoint.load(self.data)
        self.assertEqual(ckpt.meta, self.meta)
        self.assertEqual(ckpt.model.config.to_dict(), self.model.config.to_dict())
        x = np.random.default_rng(0).normal(size=(5, 3))
        np.testing.assert_array_equal(ckpt.model.predict(x).chi_post.value, self.model.predict(x).chi_post.value)
        self.assertEqual(checkpoint.dumps(ckpt.model, ckpt.meta), self.data)

    def test_deterministic_bytes(self):
        self.assertEqual(checkpoint.dumps(model(), dict(reversed(list(self.meta.items())))), self.data)
        self.assertNotEqual(checkpoint.dumps(model(seed=1), self.meta), self.data)

    def test_file(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = pathlib.Path(tmp) / 'model.ckpt'
            checkpoint.save(self.model, path, self.meta)
            self.assertEqual(path.read_bytes(), self.data)
            with open(path, 'rb') as f:
                self.assertEqual(checkpoint.load(f).meta, self.meta)

    def test_missing_file(self):
        with self.assertRaises(CheckpointError) as ctx:
            checkpoint.load(os.path.join(tempfile.gettempdir(), 'no-such-checkpoint.ckpt'))
        self.assertIn('no-such-checkpoint', ctx.exception.filename)

    def test_bad_magic(self):
        with self.assertRaises(CheckpointError) as ctx:
            checkpoint.load(b'NOTACKPT' + self.data[8:])
        self.assertIn('expected', str(ctx.exception))

    def test_bad_version(self):
        with self.assertRaises(CheckpointError):
            checkpoint.load(self.data[:8] + b'\x00\x09' + self.data[10:])

    def test_truncated(self):
        for cut in (4, 12, len(self.data) // 2, len(self.data) - 1):
            with self.assertRaises(CheckpointError) as ctx:
                checkpoint.load(self.data[:cut])
            self.assertIsNotNone(ctx.exception.pos, cut)

    def test_trailing_bytes(self):
        with self.assertRaises(CheckpointError) as ctx:
            checkpoint.load(self.data + b'\x00')
        self.assertEqual(ctx.exception.pos, len(self.data) + 1)

    def test_stream_name(self):
        stream = io.BytesIO(self.data[:20])
        stream.name = 'broken.ckpt'
        with self.assertRaises(CheckpointError) as ctx:
            checkpoint.load(stream)
        self.assertEqual(ctx.exception.filename, 'broken.ckpt')
        self.assertEqual(str(ctx.exception), 'Checkpoint error (broken.ckpt @0x%x): unexpected end of file' % ctx.exception.pos)


if __name__ == '__main__':
    unittest.main()
