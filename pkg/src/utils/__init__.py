"""
工具模块
配置、日志、异常、列文本表格读写和批次预取
"""
