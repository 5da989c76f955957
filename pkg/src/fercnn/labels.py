LABELS = ("neutral", "anger", "disgust", "fear", "happiness", "sadness", "surprise")
N_CLASSES = len(LABELS)


def label_name(index: int) -> str:
    return LABELS[index]
