/* Prints the top 10 unseen items for a user.
 *
 *   cc demo.c -I../include ../../../target/release/libselfgnn_ffi.a -lm -lpthread -ldl -o demo
 *   ./demo runs/best.sgnn runs/train.config.json 0
 */
#include <stdio.h>
#include <stdlib.h>

#include "selfgnn.h"

int main(int argc, char **argv) {
    if (argc < 3) {
        fprintf(stderr, "usage: %s CHECKPOINT CONFIG [USER]\n", argv[0]);
        return 2;
    }
    size_t user = argc > 3 ? (size_t)strtoul(argv[3], NULL, 10) : 0;
    SgModel *model = NULL;
    if (sg_model_open(argv[1], argv[2], &model) != SG_STATUS_OK) {
        fprintf(stderr, "open failed: %s\n", sg_last_error());
        return 1;
    }
    size_t items[10];
    double scores[10];
    size_t n = 0;
    if (sg_model_top_k(model, user, 10, true, items, scores, &n) != SG_STATUS_OK) {
        fprintf(stderr, "top_k failed: %s\n", sg_last_error());
        sg_model_free(model);
        return 1;
    }
    for (size_t i = 0; i < n; i++) {
        printf("%zu\t%zu\t%.4f\n", i + 1, items[i], scores[i]);
    }
    double hr = 0, ndcg = 0;
    if (sg_model_evaluate(model, 10, &hr, &ndcg) == SG_STATUS_OK) {
        printf("HR@10 %.4f  NDCG@10 %.4f\n", hr, ndcg);
    }
    sg_model_free(model);
    return 0;
}
