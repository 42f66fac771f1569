"""
科學工作流程溯源帳本安裝配置
"""
from setuptools import setup, find_packages

# 讀取 README
def read_readme():
    with open('README.md', 'r', encoding='utf-8') as f:
        return f.read()

# 讀取依賴（開發工具另列於 extras）
def read_requirements():
    with open('requirements.txt', 'r', encoding='utf-8') as f:
        lines = [line.strip() for line in f if line.strip() and not line.startswith('#')]
    dev = {'pytest', 'black', 'isort', 'flake8'}
    return [line for line in lines if line.split('>=')[0] not in dev]

setup(
    name='ledgerflow',
    version='1.0.0',
    author='Your Name',
    author_email='your.email@example.com',
    description='以許可制分散式帳本記錄科學工作流程溯源',
    long_description=read_readme(),
    long_description_content_type='text/markdown',
    url='https://github.com/yourusername/ledgerflow',
    packages=find_packages(exclude=['tests', 'tests.*']),
    py_modules=['main'],
    classifiers=[
        'Development Status :: 4 - Beta',
        'Intended Audience :: Science/Research',
        'Topic :: Scientific/Engineering',
        'License :: OSI Approved :: MIT License',
        'Programming Language :: Python :: 3',
        'Programming Language :: Python :: 3.8',
        'Programming Language :: Python :: 3.9',
        'Programming Language :: Python :: 3.10',
        'Programming Language :: Python :: 3.11',
    ],
    python_requires='>=3.8',
    install_requires=read_requirements(),
    extras_require={
        'dev': [
            'pytest>=7.4.0',
            'black>=23.7.0',
            'isort>=5.12.0',
            'flake8>=6.0.0',
        ],
    },
    entry_points={
        'console_scripts': [
            'ledgerflow=main:main',
        ],
    },
    keywords='ledger provenance workflow reproducibility blockchain',
    project_urls={
        'Bug Reports': 'https://github.com/yourusername/ledgerflow/issues',
        'Source': 'https://github.com/yourusername/ledgerflow',
    },
)
