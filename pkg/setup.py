from setuptools import setup


setup(name="vitae-desk",
      version="0.1.0",
      description="ViTAE vision transformer on a numpy autodiff engine",
      packages=["vitae"],
      license="GNU General Public License",
      install_requires=["numpy", "pandas"],
      entry_points={'console_scripts':
                    ['vitae = vitae.cli:main']
                    }
      )
