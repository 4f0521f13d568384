# -*- coding: utf-8 -*-
"""
命令行模块
"""
