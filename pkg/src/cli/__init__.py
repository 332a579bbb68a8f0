# EpiRaft CLI
