from .ranking import cosine_similarity_matrix, dcg, mean_ndcg, query_ndcg
from .forest import ForestModel, DecisionTree, label_order, predict, train_forest
from .protocol import LabeledSet, evaluate, repeated_split_eval, stratified_split, write_report

__all__ = [
    "cosine_similarity_matrix", "dcg", "mean_ndcg", "query_ndcg", "ForestModel", "DecisionTree",
    "label_order", "predict", "train_forest", "LabeledSet", "evaluate", "repeated_split_eval",
    "stratified_split", "write_report",
]
