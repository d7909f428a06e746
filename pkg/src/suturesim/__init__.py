"""suturesim: a desk-scale simulator of conditionally autonomous laparoscopic
suturing with an operator-in-the-loop supervisor and an evaluation harness."""

__version__ = "0.1.0"
