#include <math.h>
#include <stdio.h>
#include <string.h>

#include "tagkit.h"

#define CHECK(cond)                                              \
    do {                                                         \
        if (!(cond)) {                                           \
            fprintf(stderr, "line %d: %s\n", __LINE__, #cond);   \
            return 1;                                            \
        }                                                        \
    } while (0)

int main(int argc, char **argv) {
    TagkitArch *arch = NULL;
    CHECK(tagkit_arch_builtin("yfnet_a", &arch) == TAGKIT_STATUS_OK);
    TagkitComplexity c;
    CHECK(tagkit_arch_complexity(arch, 221, 221, 3, 1000, &c) == TAGKIT_STATUS_OK);
    printf("ops %llu params %llu\n", (unsigned long long)c.total_ops, (unsigned long long)c.total_params);

    char *text = NULL;
    CHECK(tagkit_arch_render(arch, &text) == TAGKIT_STATUS_OK);
    TagkitArch *again = NULL;
    CHECK(tagkit_arch_parse(text, &again) == TAGKIT_STATUS_OK);
    char *text2 = NULL;
    CHECK(tagkit_arch_render(again, &text2) == TAGKIT_STATUS_OK);
    CHECK(strcmp(text, text2) == 0);
    tagkit_string_free(text);
    tagkit_string_free(text2);
    tagkit_arch_free(arch);
    tagkit_arch_free(again);

    CHECK(tagkit_arch_parse("broken: (3,", &arch) == TAGKIT_STATUS_PARSE);
    CHECK(tagkit_last_error() != NULL);

    double scores[] = {0.9, 0.5, 0.1};
    bool relevant[] = {true, false, true};
    double ap = 0;
    CHECK(tagkit_average_precision(scores, relevant, 3, &ap) == TAGKIT_STATUS_OK);
    CHECK(fabs(ap - (1.0 + 2.0 / 3.0) / 2.0) < 1e-12);
    CHECK(fabs(tagkit_posterior(tagkit_logit(0.9), 0.0) - 0.9) < 1e-12);

    if (argc > 1) {
        TagkitTable *table = NULL;
        CHECK(tagkit_table_load(argv[1], &table) == TAGKIT_STATUS_OK);
        double bias = 0;
        bool enabled = false;
        CHECK(tagkit_table_get(table, "dog", &bias, &enabled) == TAGKIT_STATUS_OK);
        printf("dog %g %d\n", bias, enabled);
        CHECK(tagkit_table_get(table, "zebra", &bias, &enabled) == TAGKIT_STATUS_NOT_FOUND);
        tagkit_table_free(table);
    }
    printf("ok %s\n", tagkit_version());
    return 0;
}
