# heal-stage 伤口愈合阶段流水线
