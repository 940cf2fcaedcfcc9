#include <stdio.h>
#include <string.h>

#include "pdl.h"

#define CHECK(expr)                                                          \
    do {                                                                     \
        if (!(expr)) {                                                       \
            const char *err = pdl_last_error();                              \
            fprintf(stderr, "%s:%d: %s (%s)\n", __FILE__, __LINE__, #expr,   \
                    err ? err : "no error message");                         \
            return 1;                                                        \
        }                                                                    \
    } while (0)

static const char *TINY =
    "image_size = 8\n"
    "depth_size = 2\n"
    "base_width = 2\n"
    "head_hidden = 3\n"
    "depth_width = 2\n"
    "per_domain = 12\n"
    "generator_domains = 3\n"
    "n_domains = 2\n"
    "per_domain_batch = 3\n"
    "epochs = 1\n"
    "steps_per_epoch = 2\n"
    "pca_dim = 8\n";

int main(void) {
    PdlDataset *ds = NULL;
    PdlModel *model = NULL;
    double scores[64], labels[64], auc = -1.0, again = -1.0;
    size_t n = 0;

    CHECK(pdl_dataset_generate("per_domain = 1", &ds) == PDL_ERR_INVALID);
    CHECK(ds == NULL && pdl_last_error() != NULL);

    CHECK(pdl_dataset_generate(TINY, &ds) == PDL_OK);
    CHECK(pdl_dataset_len(ds) == 36 && pdl_dataset_domains(ds) == 3);
    CHECK(pdl_train(ds, TINY, NULL, &model) == PDL_OK);

    CHECK(pdl_model_score(model, ds, 0, NULL, NULL, 0, &n) == PDL_ERR_BUFFER);
    CHECK(n == 12);
    CHECK(pdl_model_score(model, ds, 0, scores, labels, 64, &n) == PDL_OK);
    CHECK(pdl_auc(scores, labels, n, &auc) == PDL_OK);
    CHECK(pdl_model_auc(model, ds, 0, &again) == PDL_OK);
    CHECK(auc == again && auc >= 0.0 && auc <= 1.0);

    pdl_model_free(model);
    pdl_dataset_free(ds);
    printf("pdl %s: auc %.4f over %zu samples\n", pdl_version(), auc, n);
    return 0;
}
