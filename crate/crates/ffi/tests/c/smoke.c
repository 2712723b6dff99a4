#include <stdio.h>
#include <string.h>

#include "apdnn.h"

/* usage: smoke <model.apdnn> <bits>; prints logits of an all-0.5 input */
int main(int argc, char **argv) {
    if (argc != 3) {
        return 64;
    }
    ApdnnModel *model = NULL;
    if (apdnn_model_load(argv[1], &model) != APDNN_STATUS_OK) {
        fprintf(stderr, "load: %s\n", apdnn_last_error());
        return 1;
    }
    if (apdnn_model_set_bits(model, (uint8_t)atoi(argv[2])) != APDNN_STATUS_OK) {
        fprintf(stderr, "set_bits: %s\n", apdnn_last_error());
        apdnn_model_free(model);
        return 1;
    }
    size_t shape[3];
    apdnn_model_input_shape(model, shape);
    size_t n = shape[0] * shape[1] * shape[2];
    size_t classes = apdnn_model_num_classes(model);
    float input[4096];
    float logits[64];
    if (n > 4096 || classes > 64) {
        apdnn_model_free(model);
        return 2;
    }
    for (size_t i = 0; i < n; i++) {
        input[i] = 0.5f;
    }
    ApdnnStatus s = apdnn_model_infer(model, input, n, 1, logits, classes);
    if (s != APDNN_STATUS_OK) {
        fprintf(stderr, "infer: %s\n", apdnn_last_error());
        apdnn_model_free(model);
        return 1;
    }
    for (size_t i = 0; i < classes; i++) {
        printf("%.9g\n", logits[i]);
    }
    if (apdnn_model_set_bits(model, 32) != APDNN_STATUS_USAGE) {
        apdnn_model_free(model);
        return 3;
    }
    apdnn_model_free(model);
    return 0;
}
