# -*- coding: utf-8 -*-
"""
核心量化引擎模块
"""
