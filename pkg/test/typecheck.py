#!/usr/bin/python3

import glob, os, subprocess, unittest
from typing import List


@unittest.skipUnless(os.environ.get('NATPN_RUN_MYPY'), 'set NATPN_RUN_MYPY=1 to type-check')
class TestTypes(unittest.TestCase):
    pkgname: str = 'natpn'

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        my_env = os.environ.copy()
        self.pypath: str = my_env.get('PYTHONPATH', os.getcwd())
        self.mypy_opts: List[str] = ['--ignore-missing-imports']

    def test_run_mypy_module(self):
        """Run mypy on all module sources"""
        mypy_call: List[str] = ['mypy'] + self.mypy_opts + ['-p', self.pkgname]
        result: int = subprocess.call(mypy_call, env=os.environ, cwd=self.pypath)
        self.assertEqual(result, 0, 'mypy on natpn')

    def test_run_mypy_tests(self):
        """Run mypy on every test module"""
        for test_file in sorted(glob.iglob(f'{os.getcwd()}/test/*.py')):
            mypy_call: List[str] = ['mypy'] + self.mypy_opts + [test_file]
            result: int = subprocess.call(mypy_call, env=os.environ, cwd=self.pypath)
            self.assertEqual(result, 0, f'mypy on test {test_file}')


if __name__ == '__main__':
    unittest.main()
